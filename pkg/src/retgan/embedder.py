"""Two-tower image/text encoders trained with a symmetric contrastive loss.

These stand in for pretrained joint vision-language encoders. Once
pretrained they are frozen: retrieval, the guidance loss and the metrics
all read them, none update them.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .layers import info_nce, init_mlp, mlp
from .numerics import AdamState, Graph, Rng, Tensor, adam_step
from .retrieval import build_map, recall_at_k
from .synthcorpus import SIZE, VOCAB, Caption, Corpus

log = logging.getLogger(__name__)

EMBED_DIM = 256
PATCH = 8
POOLED_DIM = (SIZE // PATCH) ** 2 * 3      # 48
TOKEN_DIM = 64
HIDDEN = 128
EMBX_MAGIC = b"EMBX"


@dataclass
class EmbedConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    tau: float = 0.3
    seed: int = 0
    k: int = 5


class DivergenceError(FloatingPointError):
    pass


def _pool_matrix() -> np.ndarray:
    """Constant (3072, 48) matrix averaging each 8x8 patch per channel."""
    y, x, c = np.meshgrid(np.arange(SIZE), np.arange(SIZE), np.arange(3), indexing="ij")
    src = ((y * SIZE + x) * 3 + c).reshape(-1)
    g = SIZE // PATCH
    dst = (((y // PATCH) * g + x // PATCH) * 3 + c).reshape(-1)
    m = np.zeros((SIZE * SIZE * 3, POOLED_DIM))
    m[src, dst] = 1.0 / (PATCH * PATCH)
    return m


POOL = _pool_matrix()


def init_encoders(seed: int) -> dict[str, np.ndarray]:
    rng = Rng(seed, "embedder/init")
    params = init_mlp(rng, "enc_img", [POOLED_DIM, HIDDEN, HIDDEN, EMBED_DIM])
    params["enc_txt/tok"] = rng.normal((len(VOCAB), TOKEN_DIM))
    params.update(init_mlp(rng, "enc_txt", [TOKEN_DIM, HIDDEN, EMBED_DIM]))
    return params


def image_features(p: Mapping[str, Tensor], flat_images: Tensor) -> Tensor:
    """E_I on a (B, 3072) batch of flattened rasters, differentiable in the
    pixels so generator gradients can pass through."""
    pooled = nx.add(nx.matmul(flat_images, POOL), -0.5)
    return mlp(p, "enc_img", pooled, 3)


def bag_matrix(captions: Sequence[Caption]) -> np.ndarray:
    """(B, vocab) token frequencies; row @ token table is the mean-pool."""
    m = np.zeros((len(captions), len(VOCAB)))
    for i, cap in enumerate(captions):
        if not cap.tokens:
            raise ValueError(f"caption {i} is empty")
        np.add.at(m[i], list(cap.tokens), 1.0)
        m[i] /= len(cap.tokens)
    return m


def text_features(p: Mapping[str, Tensor], bags: Tensor) -> Tensor:
    pooled = nx.matmul(bags, p["enc_txt/tok"])
    return mlp(p, "enc_txt", pooled, 2)


def _consts(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def encode_images(params: Mapping[str, np.ndarray], rasters: np.ndarray, chunk: int = 512) -> np.ndarray:
    flat = np.asarray(rasters, dtype=np.float64).reshape(len(rasters), -1)
    p = _consts(params)
    return np.concatenate([image_features(p, Tensor(flat[i:i + chunk])).data
                           for i in range(0, len(flat), chunk)]) if len(flat) else np.zeros((0, EMBED_DIM))


def encode_image(params: Mapping[str, np.ndarray], raster: np.ndarray) -> np.ndarray:
    return encode_images(params, np.asarray(raster)[None])[0]


def encode_texts(params: Mapping[str, np.ndarray], captions: Sequence[Caption]) -> np.ndarray:
    return text_features(_consts(params), Tensor(bag_matrix(captions))).data


def encode_text(params: Mapping[str, np.ndarray], caption: Caption) -> np.ndarray:
    return encode_texts(params, [caption])[0]


def contrastive_loss(p: Mapping[str, Tensor], images: np.ndarray, captions: Sequence[Caption], tau: float) -> Tensor:
    img = image_features(p, Tensor(images.reshape(len(images), -1)))
    txt = text_features(p, Tensor(bag_matrix(captions)))
    return info_nce(img, txt, tau)


def split_recall(params, corpus: Corpus, k: int = 5, split: str = "test") -> float:
    """Recall@k of caption->image search restricted to one split."""
    imgs = corpus.train_images if split == "train" else corpus.test_images
    caps = corpus.caption_ids(split)
    v = encode_images(params, corpus.images[imgs])
    t = encode_texts(params, [corpus.captions[c] for c in caps])
    rmap = build_map(t, v, k)
    local_gt = np.searchsorted(imgs, corpus.image_of_caption(caps))
    return recall_at_k(rmap, local_gt)


def pretrain_contrastive(corpus: Corpus, cfg: EmbedConfig | None = None,
                         params: dict[str, np.ndarray] | None = None) -> tuple[dict[str, np.ndarray], float, list[float]]:
    """Train both towers on matched (image, caption) pairs from the training
    split. Returns frozen parameters, test recall@k and the loss history."""
    cfg = cfg or EmbedConfig()
    params = init_encoders(cfg.seed) if params is None else params
    rng = Rng(cfg.seed, "embedder/batches")
    state = AdamState(lr=cfg.lr)
    train = corpus.train_images
    history: list[float] = []
    order = rng.permutation(len(train))
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch > len(order):
            order, cursor = rng.permutation(len(train)), 0
        idx = train[order[cursor:cursor + cfg.batch]]
        cursor += cfg.batch
        variants = rng.integers(2, len(idx))
        caps = [corpus.captions[2 * i + v] for i, v in zip(idx, variants)]
        g = Graph()
        loss = contrastive_loss(g.leaves(params), corpus.images[idx], caps, cfg.tau)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"contrastive pretraining diverged at step {step} (loss={value})")
        history.append(value)
        adam_step(params, g.backward(loss), state)
        if step % 500 == 0:
            log.info("embed step=%d loss=%.4f", step, value)
    recall = split_recall(params, corpus, cfg.k)
    for v in params.values():
        v.setflags(write=False)
    return params, recall, history


# --------------------------------------------------------- embedding cache

def save_embeddings(path: str | os.PathLike, emb: np.ndarray) -> None:
    emb = np.ascontiguousarray(emb, dtype="<f8")
    rows, dim = emb.shape
    with open(path, "wb") as fh:
        fh.write(EMBX_MAGIC + struct.pack("<III", 1, rows, dim))
        fh.write(emb.tobytes())


def load_embeddings(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != EMBX_MAGIC:
        raise ValueError(f"{path}: not an EMBX file")
    version, rows, dim = struct.unpack_from("<III", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported EMBX version {version}")
    return np.frombuffer(raw, dtype="<f8", count=rows * dim, offset=16).reshape(rows, dim).astype(np.float64)
