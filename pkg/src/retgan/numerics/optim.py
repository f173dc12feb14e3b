from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter multiplier on lr; missing names use 1.0
    lr_scale: dict[str, float] = field(default_factory=dict)


def adam_step(params: MutableMapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[MutableMapping[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place.

    A parameter whose gradient is exactly zero everywhere is left alone
    (moments included), the same way an unreached parameter is skipped.
    The whole update is rejected if any gradient holds a NaN/Inf.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        # a finite sum rules out NaN/Inf in one cheap pass; only an overflowing
        # sum needs the elementwise test
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    inv_c2 = 1.0 / np.sqrt(1.0 - b2 ** t)
    for name, g in grads.items():
        if not g.any():
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        tmp = _scratch(p.shape)
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        # p -= lr_t * m / (sqrt(v / c2) + eps)
        np.sqrt(v, out=tmp)
        tmp *= inv_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size * state.lr_scale.get(name, 1.0)
        p -= tmp
    return params, state


_SCRATCH: dict[int, np.ndarray] = {}


def _scratch(shape) -> np.ndarray:
    """Reusable work buffer; avoids allocating several large temporaries per
    parameter per step."""
    n = int(np.prod(shape))
    buf = _SCRATCH.get(n)
    if buf is None:
        if len(_SCRATCH) > 64:
            _SCRATCH.clear()
        buf = _SCRATCH[n] = np.empty(n)
    return buf.reshape(shape)
