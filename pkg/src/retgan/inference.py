"""Test-time generation, W-space statistics and latent optimization."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .embedder import encode_images, encode_texts, image_features
from .gantrain import (IMG_FLAT, W_DIM, Z_DIM, TrainConfig, generate_images, load_checkpoint,
                       synthesis_forward)
from .layers import checksum
from .retrieval import build_similarity_matrix
from .numerics import AdamState, Graph, Rng, Tensor, adam_step
from .synthcorpus import SIZE, Caption

DEFAULT_STATS_SAMPLES = 10000


class InferenceError(RuntimeError):
    pass


@dataclass
class Model:
    """Read-only view of a trained checkpoint: generator and discriminator
    weights, frozen encoders and the training-image reference pool."""
    params: dict[str, np.ndarray]
    cfg: TrainConfig
    encoders: dict[str, np.ndarray]
    ref_embeds: np.ndarray

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike) -> Model:
        ck = load_checkpoint(path)
        if ck.ref_embeds is None or not ck.encoders:
            raise InferenceError(f"{path}: checkpoint has no encoders or reference pool")
        return cls(ck.state.params, ck.cfg, ck.encoders, ck.ref_embeds)

    @property
    def pool_size(self) -> int:
        return len(self.ref_embeds)

    def checksum(self) -> str:
        return checksum({**self.params, **self.encoders})

    def text_embedding(self, caption: Caption | str) -> np.ndarray:
        if isinstance(caption, str):
            caption = Caption.parse(caption)
        return encode_texts(self.encoders, [caption])[0]

    def reference(self, index: int) -> np.ndarray:
        if not 0 <= index < self.pool_size:
            raise IndexError(f"reference index {index} outside the training pool [0, {self.pool_size})")
        return self.ref_embeds[index]


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray
    count: int


@dataclass
class OptimConfig:
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 300
    # keep w within mean +- clamp_sigma * std of the W-space statistics; None disables
    clamp_sigma: float | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.clamp_sigma is not None and self.clamp_sigma <= 0:
            raise ValueError("clamp_sigma must be positive")


@dataclass
class OptimResult:
    w: np.ndarray
    image: np.ndarray
    losses: np.ndarray                  # losses[i] is the loss after i updates
    snapshots: dict[int, np.ndarray]


def _as_text(model: Model, caption) -> np.ndarray:
    if isinstance(caption, np.ndarray):
        return caption
    return model.text_embedding(caption)


def generate_from_features(model: Model, t: np.ndarray, v: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched generation from raw frozen features; returns (images, w)."""
    return generate_images(model.params, model.cfg, np.atleast_2d(t), np.atleast_2d(v), np.atleast_2d(z))


def generate(model: Model, caption: Caption | str | np.ndarray, reference_index: int, z: np.ndarray) -> np.ndarray:
    """One (32, 32, 3) image for a caption, a training-pool reference and a
    noise vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (Z_DIM,):
        raise ValueError(f"z must have shape ({Z_DIM},), got {z.shape}")
    imgs, _ = generate_from_features(model, _as_text(model, caption), model.reference(reference_index), z)
    return imgs[0]


def sample_latents(model: Model, t: np.ndarray, v: np.ndarray, n: int, seed: int = 0,
                   chunk: int = 2000) -> np.ndarray:
    """``n`` mapping-network outputs for one (text, reference) pair with fresh z."""
    z = Rng(seed, "latent-stats").normal((n, Z_DIM))
    out = []
    for i in range(0, n, chunk):
        m = min(chunk, n - i)
        _, w = generate_from_features(model, np.tile(t, (m, 1)), np.tile(v, (m, 1)), z[i:i + m])
        out.append(w)
    return np.concatenate(out)


def stats_of(w: np.ndarray) -> LatentStats:
    return LatentStats(w.mean(axis=0), w.std(axis=0), len(w))


def sample_latent_stats(model: Model, caption, reference_index: int, n: int = DEFAULT_STATS_SAMPLES,
                        seed: int = 0) -> LatentStats:
    """Per-coordinate mean and population std of w over ``n`` noise draws."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    return stats_of(sample_latents(model, _as_text(model, caption), model.reference(reference_index), n, seed))


def nearest_reference(model: Model, feat: np.ndarray) -> int:
    """Pool index with the highest cosine similarity to an image embedding."""
    return int(np.argmax(build_similarity_matrix(np.atleast_2d(feat), model.ref_embeds)[0]))


def synthesize(model: Model, w: np.ndarray) -> np.ndarray:
    p = {k: Tensor(v) for k, v in model.params.items() if k.startswith("g_syn/")}
    w = np.atleast_2d(w)
    return synthesis_forward(p, Tensor(w)).data.reshape(len(w), SIZE, SIZE, 3)


def percept_proxy(enc: Mapping[str, Tensor], image_flat: Tensor, ref_flat: np.ndarray, ref_feat: np.ndarray) -> Tensor:
    """0.5 * pixel MSE + 0.5 * MSE of frozen image features."""
    pix = nx.mean(nx.square(nx.sub(image_flat, Tensor(ref_flat))))
    feat = nx.mean(nx.square(nx.sub(image_features(enc, image_flat), Tensor(ref_feat))))
    return nx.add(nx.mul(pix, 0.5), nx.mul(feat, 0.5))


def latent_optimize(model: Model, caption, reference_image: np.ndarray, cfg: OptimConfig | None = None,
                    init_w: np.ndarray | None = None, stats_samples: int = DEFAULT_STATS_SAMPLES,
                    snapshots: Sequence[int] = (), ref_index: int | None = None) -> OptimResult:
    """Adam on a single w (all weights frozen) toward ``reference_image``.

    Unless ``init_w`` is given, w starts at the W-space mean for this
    caption and the pool reference ``ref_index``. Without ``ref_index``
    the pool image nearest to the reference image in embedding space
    stands in for it.
    """
    cfg = cfg or OptimConfig()
    ref = np.asarray(reference_image, dtype=np.float64).reshape(1, IMG_FLAT)
    ref_feat = encode_images(model.encoders, ref)
    stats = None
    if init_w is None or cfg.clamp_sigma is not None:
        if ref_index is None:
            ref_index = nearest_reference(model, ref_feat[0])
        stats = sample_latent_stats(model, caption, ref_index, stats_samples)
    w0 = stats.mean if init_w is None else np.asarray(init_w, dtype=np.float64)
    if w0.shape != (W_DIM,):
        raise ValueError(f"w must have shape ({W_DIM},), got {w0.shape}")

    syn = {k: Tensor(v) for k, v in model.params.items() if k.startswith("g_syn/")}
    enc = {k: Tensor(v) for k, v in model.encoders.items()}
    store = {"w": w0.reshape(1, W_DIM).copy()}
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    losses = []
    snaps: dict[int, np.ndarray] = {}
    for it in range(cfg.iterations + 1):
        g = Graph()
        img = synthesis_forward(syn, g.param("w", store["w"]))
        loss = percept_proxy(enc, img, ref, ref_feat)
        value = loss.item()
        if not np.isfinite(value):
            raise InferenceError(f"latent optimization loss is non-finite at iteration {it}")
        losses.append(value)
        if it in snapshots:
            snaps[it] = img.data.reshape(SIZE, SIZE, 3).copy()
        if it == cfg.iterations:
            final = img.data.reshape(SIZE, SIZE, 3)
            break
        adam_step(store, g.backward(loss), state)
        if cfg.clamp_sigma is not None:
            lo, hi = stats.mean - cfg.clamp_sigma * stats.std, stats.mean + cfg.clamp_sigma * stats.std
            np.clip(store["w"], lo, hi, out=store["w"])
    return OptimResult(store["w"][0], final, np.array(losses), snaps)

