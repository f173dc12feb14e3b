"""Diversity, an embedding-space Frechet distance and retrieval recall."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .embedder import encode_images
from .gantrain import Z_DIM
from .inference import Model, generate_from_features
from .numerics import Rng
from .numerics.linalg import NumericalError, psd_eigvals, psd_sqrt
from .retrieval import RetrievalMap, build_map, recall_at_k

FRECHET_EPS = 1e-8
# Below half an 8-bit quantization step per image, samples are identical once
# written out, so the noise-only diversity counts as collapsed.
DEGENERATE_L2 = 0.5 / 255
REPORT_KEYS = ("d_l2_a", "d_l2_b", "ratio_l2", "d_feat_a", "d_feat_b", "ratio_feat", "frechet_proxy", "recall_at_5")


# ---------------------------------------------------------------- diversity

def mean_pairwise_distance(groups: Sequence[np.ndarray]) -> float:
    """Mean Euclidean distance over unordered pairs within each group,
    then averaged over groups. Rows of each group are flattened samples."""
    per_group = []
    for i, g in enumerate(groups):
        x = np.asarray(g, dtype=np.float64).reshape(len(g), -1)
        n = len(x)
        if n < 2:
            raise ValueError(f"group {i} has {n} sample(s); at least 2 are needed")
        # explicit differences: the Gram shortcut leaves roundoff on identical rows
        i, j = np.triu_indices(n, 1)
        per_group.append(np.linalg.norm(x[i] - x[j], axis=1).mean())
    return float(np.mean(per_group))


@dataclass
class DiversityReport:
    d_l2: float
    d_feat: float
    n_captions: int
    n_samples: int
    mode: str


def pairwise_diversity(image_groups: Sequence[np.ndarray], encoders: Mapping[str, np.ndarray],
                       mode: str = "vary_noise") -> DiversityReport:
    """``d_l2`` in pixel space and ``d_feat`` in the frozen image-feature
    space, for images grouped by caption."""
    feats = [encode_images(encoders, np.asarray(g)) for g in image_groups]
    return DiversityReport(mean_pairwise_distance(image_groups), mean_pairwise_distance(feats),
                           len(image_groups), min(len(g) for g in image_groups), mode)


@dataclass
class DiversityRatio:
    a: DiversityReport          # fixed reference, varying z
    b: DiversityReport          # varying reference and z
    ratio_l2: float
    ratio_feat: float
    degenerate: bool


def _ratio(b: float, a: float) -> float:
    return b / a if a > 0 else float("nan")


def diversity_ratio(model: Model, text_embeds: np.ndarray, caption_ids: Sequence[int], rmap: RetrievalMap,
                    n: int = 8, seed: int = 0) -> DiversityRatio:
    """Condition A keeps each caption's top-1 reference and varies z;
    condition B also draws the reference uniformly from the caption's top-K.
    Both conditions share the same noise vectors."""
    rng = Rng(seed, "diversity")
    groups_a, groups_b = [], []
    for ci in caption_ids:
        z = rng.normal((n, Z_DIM))
        refs_b = rmap.row(ci)[rng.integers(rmap.k, n)]
        t = np.tile(text_embeds[ci], (n, 1))
        img_a, _ = generate_from_features(model, t, np.tile(model.ref_embeds[rmap.row(ci)[0]], (n, 1)), z)
        img_b, _ = generate_from_features(model, t, model.ref_embeds[refs_b], z)
        groups_a.append(img_a)
        groups_b.append(img_b)
    a = pairwise_diversity(groups_a, model.encoders, "vary_noise")
    b = pairwise_diversity(groups_b, model.encoders, "vary_both")
    degenerate = a.d_l2 < DEGENERATE_L2 or a.d_feat == 0.0
    if degenerate:
        return DiversityRatio(a, b, float("nan"), float("nan"), True)
    return DiversityRatio(a, b, _ratio(b.d_l2, a.d_l2), _ratio(b.d_feat, a.d_feat), False)


# ----------------------------------------------------------------- frechet

@dataclass
class FrechetProxy:
    value: float
    dim: int
    n_a: int
    n_b: int


def shrunk_covariance(x: np.ndarray) -> np.ndarray:
    """Sample covariance, blended toward a scaled identity with weight
    d / (n + d) when there are no more samples than dimensions."""
    n, d = x.shape
    cov = np.cov(x, rowvar=False).reshape(d, d)
    if n <= d:
        alpha = d / (n + d)
        cov = (1 - alpha) * cov + alpha * (np.trace(cov) / d) * np.eye(d)
    return cov


def frechet_from_stats(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(A) + tr(B) - 2 tr((A B)^1/2), with the trace of
    the square root taken from the eigenvalues of the symmetric PSD matrix
    A^1/2 B A^1/2."""
    sa = psd_sqrt(cov_a)
    lam = psd_eigvals(sa @ cov_b @ sa)
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(lam)))
    scale = max(1.0, float(np.trace(cov_a) + np.trace(cov_b)))
    if value < 0:
        if value < -FRECHET_EPS * scale:
            raise NumericalError(f"Frechet distance came out negative ({value:.3e})")
        value = 0.0
    return value


def frechet_proxy(features_a: np.ndarray, features_b: np.ndarray) -> FrechetProxy:
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per side")
    value = frechet_from_stats(a.mean(axis=0), shrunk_covariance(a), b.mean(axis=0), shrunk_covariance(b))
    return FrechetProxy(value, a.shape[1], len(a), len(b))


# ------------------------------------------------------------------ report

def evaluate(model: Model, text_embeds: np.ndarray, rmap: RetrievalMap, test_caption_ids: np.ndarray,
             test_images: np.ndarray, test_image_of_caption: np.ndarray, n_captions: int = 50,
             n_samples: int = 8, seed: int = 0) -> dict[str, float]:
    """All report metrics for one model.

    ``test_image_of_caption`` maps each test caption to a row of
    ``test_images`` (the ground-truth pairing for recall).
    """
    test_caption_ids = np.asarray(test_caption_ids)
    div = diversity_ratio(model, text_embeds, test_caption_ids[:n_captions], rmap, n_samples, seed)

    rng = Rng(seed, "eval/frechet")
    z = rng.normal((len(test_caption_ids), Z_DIM))
    refs = rmap.indices[test_caption_ids, rng.integers(rmap.k, len(test_caption_ids))]
    fake, _ = generate_from_features(model, text_embeds[test_caption_ids], model.ref_embeds[refs], z)
    real_feat = encode_images(model.encoders, test_images)
    fid = frechet_proxy(encode_images(model.encoders, fake), real_feat)

    test_map = build_map(text_embeds[test_caption_ids], real_feat, min(5, len(test_images)))
    recall = recall_at_k(test_map, test_image_of_caption)
    return {"d_l2_a": div.a.d_l2, "d_l2_b": div.b.d_l2, "ratio_l2": div.ratio_l2,
            "d_feat_a": div.a.d_feat, "d_feat_b": div.b.d_feat, "ratio_feat": div.ratio_feat,
            "frechet_proxy": fid.value, "recall_at_5": recall}


def format_report(metrics: Mapping[str, float]) -> str:
    return "".join(f"{k}={metrics[k]:.6g}\n" for k in REPORT_KEYS)


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out
