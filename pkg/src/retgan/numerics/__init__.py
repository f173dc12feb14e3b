from .gradcheck import GradCheckReport, grad_check, grad_check_report
from .linalg import NumericalError, psd_eigvals, psd_sqrt, sym_eig
from .optim import AdamState, NonFiniteGradient, adam_step
from .rng import Rng
from .serialize import load_tensors, save_tensors
from .tensor import (
    DomainError, Graph, ShapeError, Tensor, absolute, add, as_tensor, backward, clip,
    concat, div, elementwise, exp, expand, linear, log, log_softmax, matmul, mean, mul,
    neg, reduce, relu, reshape, sigmoid, sqrt, square, sub, sum, tanh, transpose,
)

__all__ = [
    "AdamState", "DomainError", "GradCheckReport", "Graph", "NonFiniteGradient",
    "NumericalError", "Rng", "ShapeError", "Tensor", "absolute", "adam_step", "add",
    "as_tensor", "backward", "clip", "concat", "div", "elementwise", "exp", "expand",
    "grad_check", "grad_check_report", "linear", "load_tensors", "log", "log_softmax",
    "matmul", "mean", "mul", "neg", "psd_eigvals", "psd_sqrt", "reduce", "relu",
    "reshape", "save_tensors", "sigmoid", "sqrt", "square", "sub", "sum", "sym_eig",
    "tanh", "transpose",
]
