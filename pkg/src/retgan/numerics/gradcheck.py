from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward, record_kinks

# Absolute floor under the relative-error denominator: central differences at
# eps=1e-5 carry ~1e-11 of cancellation noise, which would dominate the ratio
# for gradients that are themselves ~0.
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped_kinks: int = 0
    worst: tuple[str, tuple[int, ...], float, float] | None = None


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check_report(fn: Callable[[dict[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray],
                      eps: float = 1e-5,
                      max_coords: int = 24,
                      seed: int = 0,
                      floor: float = REL_FLOOR) -> GradCheckReport:
    """Compare backward() against central differences.

    Parameters with more than ``max_coords`` entries are probed on a random
    subset. A probe whose +eps/-eps evaluations take a different branch of a
    piecewise op (ReLU, abs, clip) than the base point is discarded and
    redrawn: the function is not differentiable across that step.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    with record_kinks() as base_sig:
        loss = fn(leaves)
    if loss.size != 1:
        raise ValueError("grad_check: function must return a scalar")
    analytic = backward(loss, leaves)

    def evaluate(name, idx, delta):
        arr = params[name]
        old = arr[idx]
        arr[idx] = old + delta
        try:
            with record_kinks() as sig:
                val = fn({k: Tensor(v) for k, v in params.items()}).item()
        finally:
            arr[idx] = old
        return val, sig

    rng = Rng(seed, "gradcheck")
    report = GradCheckReport()
    for name, arr in params.items():
        n = arr.size
        if n <= max_coords:
            candidates = list(range(n))
            budget = n
        else:
            candidates = [int(i) for i in rng.permutation(n)[: max_coords * 4]]
            budget = max_coords
        worst = 0.0
        done = 0
        for flat in candidates:
            if done >= budget:
                break
            idx = np.unravel_index(flat, arr.shape)
            fp, sp = evaluate(name, idx, eps)
            fm, sm = evaluate(name, idx, -eps)
            if sp != base_sig or sm != base_sig:
                report.skipped_kinks += 1
                continue
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[name][idx])
            err = rel_error(a, numeric, floor)
            done += 1
            if err > worst:
                worst = err
            if err >= report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, tuple(int(i) for i in idx), a, numeric)
        report.per_param[name] = worst
        report.checked += done
    return report


def grad_check(fn, params, eps: float = 1e-5, **kw) -> float:
    """Maximum relative error between analytic and finite-difference gradients."""
    return grad_check_report(fn, params, eps, **kw).max_rel_err
