"""Flat ``key = value`` pipeline configuration."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

from .embedder import EmbedConfig
from .gantrain import TrainConfig
from .inference import DEFAULT_STATS_SAMPLES, OptimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # corpus
    n_train: int = 1000
    n_test: int = 200
    # contrastive encoders
    embed_steps: int = 2000
    embed_batch: int = 32
    embed_lr: float = 1e-3
    embed_tau: float = 0.3
    # retrieval
    k: int = 5
    # GAN
    lam: float = 1.0
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
    ckpt_every: int = 500
    # evaluation
    eval_captions: int = 50
    eval_samples: int = 8
    # latent optimization
    stats_samples: int = DEFAULT_STATS_SAMPLES
    opt_lr: float = 0.02
    opt_beta1: float = 0.9
    opt_beta2: float = 0.999
    opt_iters: int = 300
    # default artifact locations, overridden by command-line flags;
    # an empty index means <corpus_dir>/map.gmap
    corpus_dir: str = "corpus"
    index: str = ""
    ckpt_dir: str = "ckpt"

    def embed_config(self) -> EmbedConfig:
        return EmbedConfig(steps=self.embed_steps, batch=self.embed_batch, lr=self.embed_lr,
                           tau=self.embed_tau, seed=self.seed, k=self.k)

    def train_config(self, **overrides) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(TrainConfig) if hasattr(self, f.name)}
        kw.update(overrides)
        return TrainConfig(**kw)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(lr=self.opt_lr, beta1=self.opt_beta1, beta2=self.opt_beta2, iterations=self.opt_iters)

    def with_overrides(self, **kw) -> PipelineConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _convert(key: str, raw: str, kind):
    if kind in (bool, "bool"):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> PipelineConfig:
    kinds = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, kinds[key])
    cfg = PipelineConfig(**values)
    try:
        cfg.train_config()
        cfg.optim_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | os.PathLike) -> PipelineConfig:
    with open(path) as fh:
        return parse_config(fh.read())
