"""Command-line entry point: ``retgan <subcommand> [flags]``.

Exit codes: 0 success, 1 bad usage, 2 missing prerequisite artifact,
3 unreadable or invalid config.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import embedder, evalmetrics, gantrain, inference, retrieval, synthcorpus
from .config import ConfigError, PipelineConfig, load_config
from .numerics import Rng
from .numerics.serialize import load_tensors, save_tensors

log = logging.getLogger("retgan")

EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG = 1, 2, 3
ENCODERS_FILE = "encoders.ntck"
IMAGE_EMBEDS_FILE = "image_embeds.embx"
TEXT_EMBEDS_FILE = "text_embeds.embx"

# encoder mode and guidance per ablation row
VARIANTS = {
    "Ret": dict(encoder_mode="direct", guidance="none"),
    "Ret-L1": dict(encoder_mode="direct", guidance="l1"),
    "Ret-Contrast": dict(encoder_mode="direct", guidance="contrastive"),
    "Ret-Hyper-L1": dict(encoder_mode="hyper", guidance="l1"),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, f"{self.prog}: error: {message}")


def _require(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise CliError(EXIT_MISSING, f"missing prerequisite: {p}")


def _config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        _require(Path(args.config))
        try:
            cfg = load_config(args.config)
        except (ConfigError, UnicodeDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
    else:
        cfg = PipelineConfig()
    return cfg.with_overrides(seed=getattr(args, "seed", None))


def _index(args, cfg: PipelineConfig, corpus_dir: Path) -> Path:
    return Path(args.index or cfg.index or corpus_dir / "map.gmap")


def _ckpt_file(path: str) -> Path:
    p = Path(path)
    return p / "final.ntck" if p.is_dir() else p


# ---------------------------------------------------------------- artifacts

def _corpus(d: Path) -> synthcorpus.Corpus:
    _require(d / "manifest.txt", d / "captions.txt")
    return synthcorpus.load_corpus(d)


def _encoders(d: Path) -> dict[str, np.ndarray]:
    _require(d / ENCODERS_FILE)
    return load_tensors(d / ENCODERS_FILE)


def _embeds(d: Path) -> tuple[np.ndarray, np.ndarray]:
    _require(d / IMAGE_EMBEDS_FILE, d / TEXT_EMBEDS_FILE)
    return embedder.load_embeddings(d / IMAGE_EMBEDS_FILE), embedder.load_embeddings(d / TEXT_EMBEDS_FILE)


def train_data(corpus_dir: Path, index: Path) -> tuple[synthcorpus.Corpus, gantrain.TrainData]:
    corpus = _corpus(corpus_dir)
    enc = _encoders(corpus_dir)
    v, t = _embeds(corpus_dir)
    _require(index)
    rmap = retrieval.load_map(index)
    pool = corpus.train_images
    if rmap.n_captions != len(corpus.captions) or rmap.indices.max() >= len(pool):
        raise CliError(EXIT_MISSING, f"{index} does not match the corpus in {corpus_dir}; rerun build-index")
    data = gantrain.TrainData(images=corpus.images[pool], image_embeds=v[pool], text_embeds=t, rmap=rmap,
                              train_captions=corpus.caption_ids("train"), encoders=enc)
    return corpus, data


# -------------------------------------------------------------- subcommands

def cmd_gen_corpus(args) -> None:
    cfg = _config(args)
    out = Path(args.out_dir or args.corpus_dir or cfg.corpus_dir)
    corpus = synthcorpus.generate_corpus(cfg.seed, cfg.n_train, cfg.n_test)
    synthcorpus.save_corpus(corpus, out)
    print(f"wrote {len(corpus.images)} images and {len(corpus.captions)} captions to {out}")


def cmd_pretrain_embed(args) -> None:
    cfg = _config(args)
    d = Path(args.corpus_dir or cfg.corpus_dir)
    corpus = _corpus(d)
    params, recall, hist = embedder.pretrain_contrastive(corpus, cfg.embed_config())
    save_tensors(d / ENCODERS_FILE, params)
    embedder.save_embeddings(d / IMAGE_EMBEDS_FILE, embedder.encode_images(params, corpus.images))
    embedder.save_embeddings(d / TEXT_EMBEDS_FILE, embedder.encode_texts(params, corpus.captions))
    print(f"final_loss={hist[-1]:.6f}")
    print(f"test_recall_at_{cfg.k}={recall:.6f}")


def cmd_build_index(args) -> None:
    cfg = _config(args)
    d = Path(args.corpus_dir or cfg.corpus_dir)
    corpus = _corpus(d)
    v, t = _embeds(d)
    rmap = retrieval.build_map(t, v[corpus.train_images], cfg.k)
    out = Path(args.out or _index(args, cfg, d))
    retrieval.save_map(out, rmap)
    train_caps = corpus.caption_ids("train")
    r = retrieval.recall_at_k(rmap, corpus.image_of_caption(train_caps), rows=train_caps)
    print(f"wrote {rmap.n_captions}x{rmap.k} map to {out}")
    print(f"train_recall_at_{cfg.k}={r:.6f}")


def _train(cfg: PipelineConfig, data: gantrain.TrainData, out: Path, quiet: bool = False,
           **overrides) -> gantrain.TrainState:
    tcfg = cfg.train_config(**overrides)
    on_step = None if quiet else (lambda rec: print(gantrain.format_metrics(rec), flush=True))
    return gantrain.train(tcfg, data, ckpt_dir=out, on_step=on_step)


def cmd_train(args) -> None:
    cfg = _config(args)
    d = Path(args.corpus_dir or cfg.corpus_dir)
    _, data = train_data(d, _index(args, cfg, d))
    out = Path(args.out or cfg.ckpt_dir)
    _train(cfg, data, out)
    print(f"checkpoint: {out / 'final.ntck'}")


def _model(path: str) -> inference.Model:
    p = _ckpt_file(path)
    _require(p)
    return inference.Model.from_checkpoint(p)


def _caption(text: str) -> synthcorpus.Caption:
    try:
        return synthcorpus.Caption.parse(text)
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"caption uses words outside the vocabulary: {exc}") from None


def cmd_generate(args) -> None:
    model = _model(args.ckpt)
    z = Rng(args.seed or 0, "generate").normal((gantrain.Z_DIM,))
    try:
        img = inference.generate(model, _caption(args.caption), args.ref_index, z)
    except IndexError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    synthcorpus.write_ppm(args.out, img)
    print(f"wrote {args.out}")


def cmd_optimize_latent(args) -> None:
    cfg = _config(args)
    model = _model(args.ckpt)
    _require(Path(args.ref))
    ref = synthcorpus.read_ppm(args.ref)
    ocfg = cfg.optim_config()
    if args.iters is not None:
        ocfg = dataclasses.replace(ocfg, iterations=args.iters)
    marks = sorted({m for m in (0, 30, 100, 300, ocfg.iterations) if m <= ocfg.iterations})
    try:
        res = inference.latent_optimize(model, _caption(args.caption), ref, ocfg, stats_samples=cfg.stats_samples,
                                        snapshots=marks, ref_index=args.ref_index)
    except IndexError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for it, img in res.snapshots.items():
        synthcorpus.write_ppm(out / f"iter_{it:04d}.ppm", img)
    (out / "losses.txt").write_text("".join(f"{i} {v:.9g}\n" for i, v in enumerate(res.losses)))
    print(f"initial_loss={res.losses[0]:.6g} final_loss={res.losses[-1]:.6g}")


def _evaluate(model: inference.Model, corpus: synthcorpus.Corpus, data: gantrain.TrainData,
              cfg: PipelineConfig) -> dict[str, float]:
    test_caps = corpus.caption_ids("test")
    test_imgs = corpus.test_images
    gt = np.searchsorted(test_imgs, corpus.image_of_caption(test_caps))
    return evalmetrics.evaluate(model, data.text_embeds, data.rmap, test_caps, corpus.images[test_imgs], gt,
                                n_captions=cfg.eval_captions, n_samples=cfg.eval_samples, seed=cfg.seed)


def cmd_eval(args) -> None:
    cfg = _config(args)
    model = _model(args.ckpt)
    d = Path(args.corpus_dir or cfg.corpus_dir)
    corpus, data = train_data(d, _index(args, cfg, d))
    metrics = _evaluate(model, corpus, data, cfg)
    text = evalmetrics.format_report(metrics)
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)


def format_ablation(rows: dict[str, dict[str, float]]) -> str:
    keys = evalmetrics.REPORT_KEYS
    lines = ["variant " + " ".join(keys)]
    for name, m in rows.items():
        lines.append(name + " " + " ".join(f"{m[k]:.6g}" for k in keys))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> None:
    cfg = _config(args)
    d = Path(args.corpus_dir or cfg.corpus_dir)
    corpus, data = train_data(d, _index(args, cfg, d))
    out = Path(args.out_dir or "ablation")
    rows = {}
    for name, overrides in VARIANTS.items():
        print(f"== {name}", flush=True)
        _train(cfg, data, out / name, quiet=True, **overrides)
        model = inference.Model.from_checkpoint(out / name / "final.ntck")
        rows[name] = _evaluate(model, corpus, data, cfg)
        (out / name / "report.txt").write_text(evalmetrics.format_report(rows[name]))
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="retgan", description="Retrieval-guided text-to-image GAN pipeline")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, *flags):
        s = sub.add_parser(name)
        s.set_defaults(fn=fn)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        for f in flags:
            s.add_argument(f"--{f}")
        return s

    add("gen-corpus", cmd_gen_corpus, "out-dir", "corpus-dir")
    add("pretrain-embed", cmd_pretrain_embed, "corpus-dir")
    add("build-index", cmd_build_index, "corpus-dir", "index", "out")
    add("train", cmd_train, "corpus-dir", "index", "out")
    g = add("generate", cmd_generate, "ckpt", "caption", "out")
    g.add_argument("--ref-index", type=int, required=True)
    o = add("optimize-latent", cmd_optimize_latent, "ckpt", "caption", "ref", "out-dir")
    o.add_argument("--iters", type=int)
    o.add_argument("--ref-index", type=int, help="pool reference for the W statistics (default: nearest to --ref)")
    add("eval", cmd_eval, "ckpt", "corpus-dir", "index", "report")
    add("ablate", cmd_ablate, "corpus-dir", "index", "out-dir")
    return p


_REQUIRED = {
    "train": ("config",), "eval": ("config", "ckpt"), "generate": ("ckpt", "caption", "out"),
    "optimize-latent": ("ckpt", "caption", "ref", "out_dir"),
}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_usage(sys.stderr)
            raise CliError(EXIT_USAGE, "a subcommand is required")
        missing = [f for f in _REQUIRED.get(args.command, ()) if not getattr(args, f)]
        if missing:
            parser.print_usage(sys.stderr)
            raise CliError(EXIT_USAGE, f"{args.command}: missing --{missing[0].replace('_', '-')}")
        args.fn(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
