"""Visual-text conditional encoding.

The text map is a plain affine layer. The visual map is either a second
affine layer ("direct") or an affine layer whose 256x128 weight matrix is
predicted per sample from the text embedding by a small MLP ("hyper").
The predicted flat vector is read row-major: ``phi[i, j] = flat[i*128 + j]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

FEAT_DIM = 256
COND_DIM = 128
HYPER_HIDDEN = 64
HYPER_OUT = FEAT_DIM * COND_DIM     # 32768
INIT_STD = 0.02
MODES = ("direct", "hyper")


class ModeError(RuntimeError):
    pass


def _check_width(x: Tensor, what: str) -> None:
    if x.data.ndim != 2 or x.shape[1] != FEAT_DIM:
        raise nx.ShapeError(f"{what} must have shape (batch, {FEAT_DIM}), got {x.shape}")


@dataclass(frozen=True)
class EncoderBundle:
    """Names and mode of one encoder instance; parameters live in the
    caller's store under ``{prefix}/...``."""
    prefix: str
    mode: str = "hyper"
    additive: bool = False   # hyper only: phi = base + H(t) instead of phi = H(t)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"encoder mode must be one of {MODES}, got {self.mode!r}")

    def init_params(self, rng: Rng) -> dict[str, np.ndarray]:
        p = self.prefix
        out = {
            f"{p}/wt": rng.normal((FEAT_DIM, COND_DIM)) * INIT_STD,
            f"{p}/bt": np.zeros(COND_DIM),
        }
        if self.mode == "direct":
            out[f"{p}/wv"] = rng.normal((FEAT_DIM, COND_DIM)) * INIT_STD
        else:
            out[f"{p}/h_w0"] = rng.normal((FEAT_DIM, HYPER_HIDDEN)) * INIT_STD
            out[f"{p}/h_b0"] = np.zeros(HYPER_HIDDEN)
            # second layer starts smaller so predicted weights begin near zero
            out[f"{p}/h_w1"] = rng.normal((HYPER_HIDDEN, HYPER_OUT)) * (INIT_STD / np.sqrt(HYPER_HIDDEN))
            out[f"{p}/h_b1"] = np.zeros(HYPER_OUT)
            if self.additive:
                out[f"{p}/wv_base"] = rng.normal((FEAT_DIM, COND_DIM)) * INIT_STD
        out[f"{p}/bv"] = np.zeros(COND_DIM)
        return out

    def encode_text(self, p: Mapping[str, Tensor], t: Tensor) -> Tensor:
        _check_width(t, "text feature")
        return nx.linear(t, p[f"{self.prefix}/wt"], p[f"{self.prefix}/bt"])

    def encode_visual_direct(self, p: Mapping[str, Tensor], v: Tensor) -> Tensor:
        if self.mode != "direct":
            raise ModeError(f"{self.prefix}: direct visual encoding called on a {self.mode}-mode bundle")
        _check_width(v, "visual feature")
        return nx.linear(v, p[f"{self.prefix}/wv"], p[f"{self.prefix}/bv"])

    def predict_weights(self, p: Mapping[str, Tensor], t: Tensor) -> Tensor:
        """(B, 256, 128) per-sample weight matrices predicted from text."""
        if self.mode != "hyper":
            raise ModeError(f"{self.prefix}: hypernetwork called on a {self.mode}-mode bundle")
        _check_width(t, "text feature")
        pre = self.prefix
        h = nx.relu(nx.linear(t, p[f"{pre}/h_w0"], p[f"{pre}/h_b0"]))
        flat = nx.linear(h, p[f"{pre}/h_w1"], p[f"{pre}/h_b1"])
        phi = nx.reshape(flat, (t.shape[0], FEAT_DIM, COND_DIM))
        if self.additive:
            base = nx.reshape(p[f"{pre}/wv_base"], (1, FEAT_DIM, COND_DIM))
            phi = nx.add(phi, nx.expand(base, phi.shape))
        return phi

    def encode_visual_hyper(self, p: Mapping[str, Tensor], v: Tensor, t: Tensor) -> Tensor:
        _check_width(v, "visual feature")
        phi = self.predict_weights(p, t)
        b = v.shape[0]
        ve = nx.reshape(nx.matmul(nx.reshape(v, (b, 1, FEAT_DIM)), phi), (b, COND_DIM))
        bias = nx.expand(nx.reshape(p[f"{self.prefix}/bv"], (1, COND_DIM)), (b, COND_DIM))
        return nx.add(ve, bias)

    def encode_visual(self, p: Mapping[str, Tensor], v: Tensor, t: Tensor) -> Tensor:
        if self.mode == "direct":
            return self.encode_visual_direct(p, v)
        return self.encode_visual_hyper(p, v, t)

    def encode(self, p: Mapping[str, Tensor], v: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
        """(t_e, v_e) for a batch of (visual, text) features."""
        return self.encode_text(p, t), self.encode_visual(p, v, t)
