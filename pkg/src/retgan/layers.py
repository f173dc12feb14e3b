"""Small building blocks shared by the encoders, the GAN and the metrics."""
from __future__ import annotations

import hashlib
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor


def init_mlp(rng: Rng, prefix: str, sizes: Sequence[int], std: float | None = None) -> dict[str, np.ndarray]:
    """Weights ``{prefix}/w{i}`` and zero biases ``{prefix}/b{i}``.

    ``std=None`` uses He scaling ``sqrt(2 / fan_in)``.
    """
    out = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = np.sqrt(2.0 / fan_in) if std is None else std
        out[f"{prefix}/w{i}"] = rng.normal((fan_in, fan_out)) * s
        out[f"{prefix}/b{i}"] = np.zeros(fan_out)
    return out


def mlp(p: Mapping[str, Tensor], prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """ReLU between layers, linear output."""
    for i in range(n_layers):
        x = nx.linear(x, p[f"{prefix}/w{i}"], p[f"{prefix}/b{i}"])
        if i < n_layers - 1:
            x = nx.relu(x)
    return x


def row_norms(x: Tensor) -> Tensor:
    return nx.sqrt(nx.sum(nx.square(x), axis=1))


def l2_normalize(x: Tensor) -> Tensor:
    n = nx.reshape(row_norms(x), (x.shape[0], 1))
    return nx.div(x, nx.expand(n, x.shape))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    return nx.matmul(l2_normalize(a), nx.transpose(l2_normalize(b)))


def info_nce(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE: row i of ``a`` should match row i of ``b`` against
    the other rows of the batch. Averages the a->b and b->a cross-entropies."""
    n = a.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    logits = nx.mul(cosine_matrix(a, b), 1.0 / tau)
    eye = np.eye(n)
    fwd = nx.sum(nx.mul(nx.log_softmax(logits, axis=1), eye))
    bwd = nx.sum(nx.mul(nx.log_softmax(logits, axis=0), eye))
    return nx.mul(nx.add(fwd, bwd), -0.5 / n)


def checksum(store: Mapping[str, np.ndarray], prefix: str = "") -> str:
    """Content hash over the entries whose names start with ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(store):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(store[name]).tobytes())
    return h.hexdigest()
