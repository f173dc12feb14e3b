from __future__ import annotations

import numpy as np


class NumericalError(ArithmeticError):
    pass


def sym_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix (ascending eigenvalues)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig: expected a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    try:
        return np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(sym) if np.all(np.isfinite(sym)) else float("inf")
        raise NumericalError(f"symmetric eigensolve did not converge (cond={cond:.3e}, n={a.shape[0]})") from exc


def psd_eigvals(a: np.ndarray, rel_tol: float = 1e-8) -> np.ndarray:
    """Eigenvalues of a matrix that should be PSD, with round-off negatives
    clamped to zero. Negatives beyond ``rel_tol`` of the largest magnitude
    indicate a real defect and raise."""
    w, _ = sym_eig(a)
    scale = max(float(np.max(np.abs(w))), 1e-300) if w.size else 1.0
    if w.size and w[0] < -rel_tol * scale:
        raise NumericalError(f"matrix is not PSD: eigenvalue {w[0]:.3e} (largest magnitude {scale:.3e})")
    return np.clip(w, 0.0, None)


def psd_sqrt(a: np.ndarray, rel_tol: float = 1e-8) -> np.ndarray:
    w, q = sym_eig(a)
    scale = max(float(np.max(np.abs(w))), 1e-300) if w.size else 1.0
    if w.size and w[0] < -rel_tol * scale:
        raise NumericalError(f"matrix is not PSD: eigenvalue {w[0]:.3e}")
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T
