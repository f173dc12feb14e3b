"""Offline cross-modal search: cosine similarity matrix and top-K map."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

DEFAULT_K = 5
GMAP_MAGIC = b"GMAP"
GMAP_VERSION = 1


class ZeroVectorError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalMap:
    """``indices[i]`` holds the K image ids most similar to caption i,
    best first."""
    indices: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_captions(self) -> int:
        return self.indices.shape[0]

    def row(self, caption_index: int) -> np.ndarray:
        return self.indices[caption_index]


def cosine_similarity(t: np.ndarray, v: np.ndarray) -> float:
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nt, nv = np.linalg.norm(t), np.linalg.norm(v)
    if nt == 0 or nv == 0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(t, v) / (nt * nv), -1.0, 1.0))


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroVectorError(f"{what} embedding {int(zero[0])} is the zero vector")
    return x / norms[:, None]


def build_similarity_matrix(text_embeds: np.ndarray, image_embeds: np.ndarray) -> np.ndarray:
    """All-pairs cosine scores, shape (N_C, N_I)."""
    if text_embeds.shape[1] != image_embeds.shape[1]:
        raise ValueError(f"embedding widths differ: {text_embeds.shape} vs {image_embeds.shape}")
    s = _unit_rows(text_embeds, "text") @ _unit_rows(image_embeds, "image").T
    return np.clip(s, -1.0, 1.0)


def topk_map(sim: np.ndarray, k: int = DEFAULT_K) -> RetrievalMap:
    """Per row, the ``k`` highest-scoring columns in descending order; equal
    scores are ordered by smaller column index."""
    n_i = sim.shape[1]
    if not 1 <= k <= n_i:
        raise ValueError(f"K={k} must be in [1, N_I={n_i}]")
    # stable sort on negated scores keeps index order within ties
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return RetrievalMap(np.ascontiguousarray(order, dtype=np.int64))


def build_map(text_embeds: np.ndarray, image_embeds: np.ndarray, k: int = DEFAULT_K) -> RetrievalMap:
    return topk_map(build_similarity_matrix(text_embeds, image_embeds), k)


def sample_reference(rmap: RetrievalMap, caption_index: int, rng: Rng) -> int:
    if not 0 <= caption_index < rmap.n_captions:
        raise IndexError(f"caption index {caption_index} outside [0, {rmap.n_captions})")
    return int(rmap.indices[caption_index, int(rng.integers(rmap.k))])


def sample_references(rmap: RetrievalMap, caption_indices: np.ndarray, rng: Rng) -> np.ndarray:
    """Vectorised :func:`sample_reference`: one uniform pick per caption."""
    cols = rng.integers(rmap.k, len(caption_indices))
    return rmap.indices[np.asarray(caption_indices), cols]


def recall_at_k(rmap: RetrievalMap, ground_truth: np.ndarray, rows: np.ndarray | None = None) -> float:
    """Fraction of captions whose ground-truth image is in their row."""
    idx = rmap.indices if rows is None else rmap.indices[rows]
    gt = np.asarray(ground_truth).reshape(-1, 1)
    if len(gt) != len(idx):
        raise ValueError(f"{len(gt)} ground-truth ids for {len(idx)} captions")
    return float(np.mean(np.any(idx == gt, axis=1)))


def save_map(path: str | os.PathLike, rmap: RetrievalMap) -> None:
    n_c, k = rmap.indices.shape
    with open(path, "wb") as fh:
        fh.write(GMAP_MAGIC + struct.pack("<III", GMAP_VERSION, n_c, k))
        fh.write(rmap.indices.astype("<u4").tobytes())


def load_map(path: str | os.PathLike) -> RetrievalMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != GMAP_MAGIC:
        raise ValueError(f"{path}: not a GMAP file")
    version, n_c, k = struct.unpack_from("<III", raw, 4)
    if version != GMAP_VERSION:
        raise ValueError(f"{path}: unsupported GMAP version {version}")
    idx = np.frombuffer(raw, dtype="<u4", count=n_c * k, offset=16).reshape(n_c, k)
    return RetrievalMap(idx.astype(np.int64))
