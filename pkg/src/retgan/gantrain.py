"""Generator, discriminator, losses and the alternating training loop.

Parameter stores are flat ``name -> float64 array`` dicts:

* ``g_map/*``, ``g_syn/*``  generator mapping and synthesis MLPs
* ``g_enc/*``               generator-side EncoderBundle
* ``d_trunk/*``, ``d_head/*`` discriminator
* ``d_enc/*``               discriminator-side EncoderBundle

The frozen two-tower encoders (``enc_img/*``, ``enc_txt/*``) are carried
alongside but never receive gradients.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from .embedder import image_features
from .encoding import COND_DIM, FEAT_DIM, HYPER_HIDDEN, INIT_STD, EncoderBundle
from .layers import info_nce, init_mlp, mlp
from .numerics import AdamState, Graph, Rng, Tensor, adam_step
from .numerics.serialize import decode_text, dumps_tensors, encode_text, load_tensors, save_tensors
from .retrieval import RetrievalMap, sample_references
from .synthcorpus import SIZE

log = logging.getLogger(__name__)

Z_DIM = 64
W_DIM = 128
IMG_FLAT = SIZE * SIZE * 3
SYN_OUT_GAIN = 0.1
P_MIN, P_MAX = 1e-7, 1.0 - 1e-7
GUIDANCE = ("none", "l1", "contrastive")
GAN_LOSSES = ("nonsaturating", "minimax")


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1.0
    k: int = 5
    lr_g: float = 3e-3
    lr_d: float = 3e-3
    beta1: float = 0.0
    beta2: float = 0.99
    batch: int = 16
    steps: int = 2000
    guidance: str = "l1"
    encoder_mode: str = "hyper"
    hyper_additive: bool = False
    gan_loss: str = "nonsaturating"
    tau_g: float = 0.1
    seed: int = 0
    ckpt_every: int = 500

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if self.guidance not in GUIDANCE:
            raise ValueError(f"guidance must be one of {GUIDANCE}")
        if self.gan_loss not in GAN_LOSSES:
            raise ValueError(f"gan_loss must be one of {GAN_LOSSES}")
        if self.encoder_mode not in ("direct", "hyper"):
            raise ValueError("encoder_mode must be direct or hyper")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> TrainConfig:
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                t = types[k]
                kw[k] = (v == "True") if t in ("bool", bool) else (int(v) if t in ("int", int)
                                                                  else float(v) if t in ("float", float) else v)
        return cls(**kw)

    def bundles(self) -> tuple[EncoderBundle, EncoderBundle]:
        return (EncoderBundle("g_enc", self.encoder_mode, self.hyper_additive),
                EncoderBundle("d_enc", self.encoder_mode, self.hyper_additive))


@dataclass
class TrainData:
    """Frozen inputs the loop reads. Image ids in the map index ``images``
    and ``image_embeds``; caption ids index ``text_embeds``."""
    images: np.ndarray            # (N, 32, 32, 3)
    image_embeds: np.ndarray      # (N, 256) frozen E_I features
    text_embeds: np.ndarray       # (N_C, 256) frozen E_C features
    rmap: RetrievalMap
    train_captions: np.ndarray
    encoders: dict[str, np.ndarray]
    caption_to_image: np.ndarray | None = None

    def ground_truth(self, caption_ids: np.ndarray) -> np.ndarray:
        if self.caption_to_image is not None:
            return self.caption_to_image[caption_ids]
        return np.asarray(caption_ids) // 2


@dataclass
class Batch:
    captions: np.ndarray
    z: np.ndarray
    k1: np.ndarray
    k2: np.ndarray


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    adam_g: AdamState
    adam_d: AdamState
    rng: Rng
    step: int = 0
    history: list[dict] = field(default_factory=list)


# -------------------------------------------------------------------- model

def init_model(cfg: TrainConfig) -> dict[str, np.ndarray]:
    rng = Rng(cfg.seed, "gan/init")
    g_enc, d_enc = cfg.bundles()
    p: dict[str, np.ndarray] = {}
    p.update(init_mlp(rng, "g_map", [Z_DIM + 2 * COND_DIM, 256, 256, W_DIM]))
    p.update(init_mlp(rng, "g_syn", [W_DIM, 512, 1024, IMG_FLAT]))
    # start inside tanh's linear range; a He-scaled output layer saturates
    # most pixels at 0 or 1, where the generator gets almost no gradient
    p["g_syn/w2"] *= SYN_OUT_GAIN
    p.update(g_enc.init_params(rng.spawn("g_enc")))
    p.update(init_mlp(rng, "d_trunk", [IMG_FLAT, 512, 256]))
    p.update(init_mlp(rng, "d_head", [256 + 2 * COND_DIM, 128, 1]))
    p.update(d_enc.init_params(rng.spawn("d_enc")))
    return p


def mapping_forward(p: Mapping[str, Tensor], z: Tensor, t_e: Tensor, v_e: Tensor) -> Tensor:
    return mlp(p, "g_map", nx.concat([z, t_e, v_e], axis=1), 3)


def synthesis_forward(p: Mapping[str, Tensor], w: Tensor) -> Tensor:
    """Flat (B, 3072) raster in [0, 1]."""
    return nx.add(nx.mul(nx.tanh(mlp(p, "g_syn", w, 3)), 0.5), 0.5)


def generator_forward(p: Mapping[str, Tensor], z, t_e, v_e) -> tuple[Tensor, Tensor]:
    """Returns (images (B, 32, 32, 3), w (B, 128))."""
    w = mapping_forward(p, nx.as_tensor(z), nx.as_tensor(t_e), nx.as_tensor(v_e))
    img = synthesis_forward(p, w)
    return nx.reshape(img, (img.shape[0], SIZE, SIZE, 3)), w


def discriminator_forward(p: Mapping[str, Tensor], image, t_e, v_e) -> Tensor:
    """One logit per sample, shape (B,)."""
    image = nx.as_tensor(image)
    flat = nx.reshape(image, (image.shape[0], IMG_FLAT))
    feat = mlp(p, "d_trunk", nx.mul(nx.add(flat, -0.5), 2.0), 2)
    h = nx.concat([feat, nx.as_tensor(t_e), nx.as_tensor(v_e)], axis=1)
    logit = mlp(p, "d_head", h, 2)
    return nx.reshape(logit, (image.shape[0],))


def lr_scales(params: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Per-parameter learning-rate multipliers equal to each weight matrix's
    init scale (He for MLP layers, the fixed std for the encoders).

    Adam moves every entry by roughly ``lr`` per step whatever its size, so
    without this a 3072-input layer or the small-init hypernetwork output
    layer change by many times their own scale in a few steps. Biases keep
    the base rate.
    """
    out = {}
    for name, arr in params.items():
        leaf = name.rsplit("/", 1)[1]
        if "_enc/" in name:
            if leaf == "h_w1":
                out[name] = INIT_STD / np.sqrt(HYPER_HIDDEN)
            elif leaf in ("wt", "wv", "wv_base", "h_w0"):
                out[name] = INIT_STD
        elif leaf.startswith("w") and arr.ndim == 2:
            out[name] = float(np.sqrt(2.0 / arr.shape[0]))
    return out


# ------------------------------------------------------------------- losses

def _prob(logits: Tensor) -> Tensor:
    return nx.clip(nx.sigmoid(logits), P_MIN, P_MAX)


def gen_adv_loss(fake_logits: Tensor, mode: str = "nonsaturating") -> Tensor:
    p = _prob(fake_logits)
    if mode == "nonsaturating":
        return nx.neg(nx.mean(nx.log(p)))
    return nx.mean(nx.log(nx.add(nx.neg(p), 1.0)))


def disc_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    real = nx.mean(nx.log(_prob(real_logits)))
    fake = nx.mean(nx.log(nx.add(nx.neg(_prob(fake_logits)), 1.0)))
    return nx.neg(nx.add(real, fake))


def guide_l1(gen_feat: Tensor, ref_feat) -> Tensor:
    """Batch mean of the per-sample mean absolute feature difference."""
    return nx.mean(nx.absolute(nx.sub(gen_feat, nx.as_tensor(ref_feat))))


def guide_contrastive(gen_feat: Tensor, ref_feat, tau: float) -> Tensor:
    if gen_feat.shape[0] < 2:
        raise ValueError("contrastive guidance needs a batch of at least 2")
    return info_nce(gen_feat, nx.as_tensor(ref_feat), tau)


def total_g_loss(l_gen: Tensor, l_guide: Tensor | None, lam: float) -> Tensor:
    if l_guide is None:
        return l_gen
    return nx.add(l_gen, nx.mul(l_guide, lam))


# ------------------------------------------------------------ batch + steps

def sample_batch(data: TrainData, cfg: TrainConfig, rng: Rng) -> Batch:
    caps = data.train_captions[rng.integers(len(data.train_captions), cfg.batch)]
    z = rng.normal((cfg.batch, Z_DIM))
    k1 = sample_references(data.rmap, caps, rng)
    k2 = sample_references(data.rmap, caps, rng)
    return Batch(caps, z, k1, k2)


def condition_input(embeds: np.ndarray) -> np.ndarray:
    """Frozen embeddings rescaled to unit RMS per row before they enter an
    EncoderBundle. The raw encoder outputs are small (about 0.2 per
    coordinate), which left the encoded conditions swamped by z."""
    embeds = np.asarray(embeds, dtype=np.float64)
    norms = np.linalg.norm(embeds, axis=-1, keepdims=True)
    return embeds * (np.sqrt(FEAT_DIM) / np.maximum(norms, 1e-12))


def _conditions(p: Mapping[str, Tensor], bundle: EncoderBundle, data: TrainData, batch: Batch):
    t = Tensor(condition_input(data.text_embeds[batch.captions]))
    v = Tensor(condition_input(data.image_embeds[batch.k1]))
    return bundle.encode(p, v, t)


def generator_losses(p: Mapping[str, Tensor], data: TrainData, batch: Batch, cfg: TrainConfig,
                     enc: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """L_gen, L_guide (if enabled) and L_G for one batch."""
    g_enc, d_enc = cfg.bundles()
    enc = enc if enc is not None else {k: Tensor(v) for k, v in data.encoders.items()}
    t_e, v_e = _conditions(p, g_enc, data, batch)
    fake, _ = generator_forward(p, Tensor(batch.z), t_e, v_e)
    dt_e, dv_e = _conditions(p, d_enc, data, batch)
    l_gen = gen_adv_loss(discriminator_forward(p, fake, dt_e, dv_e), cfg.gan_loss)
    out = {"gen": l_gen}
    l_guide = None
    if cfg.guidance != "none":
        feat = image_features(enc, nx.reshape(fake, (fake.shape[0], IMG_FLAT)))
        ref = data.image_embeds[batch.k2]
        l_guide = guide_l1(feat, ref) if cfg.guidance == "l1" else guide_contrastive(feat, ref, cfg.tau_g)
        out["guide"] = l_guide
    out["total"] = total_g_loss(l_gen, l_guide, cfg.lam)
    return out


def discriminator_losses(p: Mapping[str, Tensor], data: TrainData, batch: Batch, cfg: TrainConfig,
                         fake_images: np.ndarray) -> Tensor:
    _, d_enc = cfg.bundles()
    dt_e, dv_e = _conditions(p, d_enc, data, batch)
    real = Tensor(data.images[data.ground_truth(batch.captions)])
    real_logits = discriminator_forward(p, real, dt_e, dv_e)
    fake_logits = discriminator_forward(p, Tensor(fake_images), dt_e, dv_e)
    return disc_loss(real_logits, fake_logits)


def generate_images(params: Mapping[str, np.ndarray], cfg: TrainConfig, t: np.ndarray, v: np.ndarray,
                    z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient-free generator pass from frozen features. Returns (images, w)."""
    p = {k: Tensor(a) for k, a in params.items() if k.startswith("g_")}
    g_enc, _ = cfg.bundles()
    t_e, v_e = g_enc.encode(p, Tensor(condition_input(v)), Tensor(condition_input(t)))
    img, w = generator_forward(p, Tensor(z), t_e, v_e)
    return img.data, w.data


def _split(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def discriminator_update(state: TrainState, data: TrainData, cfg: TrainConfig, batch: Batch, step: int) -> float:
    """Adam step on the D side only; fakes come from a gradient-free
    generator pass so nothing reaches G."""
    fake, _ = generate_images(state.params, cfg, data.text_embeds[batch.captions],
                              data.image_embeds[batch.k1], batch.z)
    graph = Graph()
    p = graph.leaves(state.params, trainable=("d_",))
    l_d = discriminator_losses(p, data, batch, cfg, fake)
    _check_finite(l_d, "L_D", step)
    adam_step(_split(state.params, "d_"), graph.backward(l_d), state.adam_d)
    return l_d.item()


def generator_update(state: TrainState, data: TrainData, cfg: TrainConfig, batch: Batch, step: int) -> dict:
    """Adam step on the G side only; D weights enter as constants."""
    graph = Graph()
    p = graph.leaves(state.params, trainable=("g_",))
    losses = generator_losses(p, data, batch, cfg)
    _check_finite(losses["total"], "L_G", step)
    adam_step(_split(state.params, "g_"), graph.backward(losses["total"]), state.adam_g)
    return {k: v.item() for k, v in losses.items()}


def train_step(state: TrainState, data: TrainData, cfg: TrainConfig) -> dict:
    """One discriminator update followed by one generator update on the
    same batch."""
    batch = sample_batch(data, cfg, state.rng)
    step = state.step + 1
    ld = discriminator_update(state, data, cfg, batch, step)
    lg = generator_update(state, data, cfg, batch, step)
    state.step = step
    rec = {"step": step, "ld": ld, "lg": lg["gen"], "lguide": lg.get("guide", 0.0)}
    state.history.append(rec)
    return rec


def _check_finite(loss: Tensor, what: str, step: int) -> None:
    if not np.isfinite(loss.item()):
        raise TrainingError(f"{what} is non-finite at step {step}")


def _adam(cfg: TrainConfig, lr: float, params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, lr_scale=lr_scales(params))


def init_state(cfg: TrainConfig) -> TrainState:
    params = init_model(cfg)
    return TrainState(params=params,
                      adam_g=_adam(cfg, cfg.lr_g, _split(params, "g_")),
                      adam_d=_adam(cfg, cfg.lr_d, _split(params, "d_")),
                      rng=Rng(cfg.seed, "gan/train"))


def format_metrics(rec: Mapping) -> str:
    return f"step={rec['step']} ld={rec['ld']:.6f} lg={rec['lg']:.6f} lguide={rec['lguide']:.6f}"


def train(cfg: TrainConfig, data: TrainData, state: TrainState | None = None,
          ckpt_dir: str | os.PathLike | None = None,
          on_step: Callable[[dict], None] | None = None,
          until: int | None = None) -> TrainState:
    """Run ``train_step`` until ``cfg.steps`` (or ``until``) steps are done.

    Resuming simply means passing the state loaded from a checkpoint.
    """
    state = state or init_state(cfg)
    stop = cfg.steps if until is None else min(until, cfg.steps)
    log_fh = None
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        log_fh = open(Path(ckpt_dir) / "metrics.log", "a")
    try:
        while state.step < stop:
            rec = train_step(state, data, cfg)
            line = format_metrics(rec)
            if log_fh is not None:
                log_fh.write(line + "\n")
            if on_step is not None:
                on_step(rec)
            if ckpt_dir is not None and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                save_checkpoint(Path(ckpt_dir) / "latest.ntck", state, cfg, data)
    finally:
        if log_fh is not None:
            log_fh.close()
    if ckpt_dir is not None:
        save_checkpoint(Path(ckpt_dir) / "final.ntck", state, cfg, data)
    return state


# -------------------------------------------------------------- checkpoints

def _u64_pair(x: int) -> list[int]:
    return [x & 0xFFFFFFFF, x >> 32]


def checkpoint_tensors(state: TrainState, cfg: TrainConfig, data: TrainData | None = None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name in sorted(state.params):
        out[name] = state.params[name]
    for tag, adam, prefix in (("adam_g", state.adam_g, "g_"), ("adam_d", state.adam_d, "d_")):
        out[f"{tag}/step"] = np.array([adam.step], dtype=np.uint32)
        for name in sorted(state.params):
            if name.startswith(prefix):
                zeros = np.zeros_like(state.params[name])
                out[f"{tag}/m/{name}"] = adam.m.get(name, zeros)
                out[f"{tag}/v/{name}"] = adam.v.get(name, zeros)
    g_enc, d_enc = cfg.bundles()
    out["g_enc/mode"] = np.array([("direct", "hyper").index(g_enc.mode)], dtype=np.uint32)
    out["d_enc/mode"] = np.array([("direct", "hyper").index(d_enc.mode)], dtype=np.uint32)
    out["meta/step"] = np.array([state.step], dtype=np.uint32)
    key, ctr = state.rng.state()
    out["meta/rng"] = np.array(_u64_pair(key) + _u64_pair(ctr), dtype=np.uint32)
    out["meta/config"] = encode_text(cfg.to_text())
    if data is not None:
        for name in sorted(data.encoders):
            out[name] = data.encoders[name]
        out["ref_pool/embeds"] = data.image_embeds
    return out


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, data: TrainData | None = None) -> None:
    save_tensors(path, checkpoint_tensors(state, cfg, data))


def checkpoint_bytes(state: TrainState, cfg: TrainConfig, data: TrainData | None = None) -> bytes:
    return dumps_tensors(checkpoint_tensors(state, cfg, data))


@dataclass
class Checkpoint:
    state: TrainState
    cfg: TrainConfig
    encoders: dict[str, np.ndarray]
    ref_embeds: np.ndarray | None


def load_checkpoint(path) -> Checkpoint:
    t = load_tensors(path)
    cfg = TrainConfig.from_text(decode_text(t["meta/config"]))
    model_prefixes = ("g_map/", "g_syn/", "g_enc/", "d_trunk/", "d_head/", "d_enc/")
    params = {k: v.copy() for k, v in t.items()
              if k.startswith(model_prefixes) and not k.endswith("/mode")}
    adams = []
    for tag, lr in (("adam_g", cfg.lr_g), ("adam_d", cfg.lr_d)):
        a = _adam(cfg, lr, _split(params, tag[-1] + "_"))
        a.step = int(t[f"{tag}/step"][0])
        for k, v in t.items():
            if k.startswith(f"{tag}/m/") and a.step > 0:
                a.m[k[len(tag) + 3:]] = v.copy()
            elif k.startswith(f"{tag}/v/") and a.step > 0:
                a.v[k[len(tag) + 3:]] = v.copy()
        adams.append(a)
    r = [int(x) for x in t["meta/rng"]]
    rng = Rng(cfg.seed, "gan/train", key=r[0] | (r[1] << 32), counter=r[2] | (r[3] << 32))
    state = TrainState(params, adams[0], adams[1], rng, step=int(t["meta/step"][0]))
    encoders = {k: v for k, v in t.items() if k.startswith(("enc_img/", "enc_txt/"))}
    return Checkpoint(state, cfg, encoders, t.get("ref_pool/embeds"))


# -------------------------------------------------------------- diagnostics

def heldout_guide(params: Mapping[str, np.ndarray], data: TrainData, cfg: TrainConfig,
                  caption_ids: np.ndarray, seed: int = 1234) -> float:
    """L1 guidance loss on a fixed set of captions with fixed noise and
    references, for comparing checkpoints of one run."""
    rng = Rng(seed, "heldout")
    caption_ids = np.asarray(caption_ids)
    z = rng.normal((len(caption_ids), Z_DIM))
    k1 = sample_references(data.rmap, caption_ids, rng)
    k2 = sample_references(data.rmap, caption_ids, rng)
    imgs, _ = generate_images(params, cfg, data.text_embeds[caption_ids], data.image_embeds[k1], z)
    enc = {k: Tensor(v) for k, v in data.encoders.items()}
    feat = image_features(enc, Tensor(imgs.reshape(len(imgs), IMG_FLAT)))
    return guide_l1(feat, data.image_embeds[k2]).item()
