"""Procedural scenes of colored shapes on a 3x3 grid, with grammar captions.

Each scene is rendered at 32x32 with hard edges. Every image gets two
captions: a positional one ("red circle top-left on blue background") and a
coarse one that drops the cell tokens, so a retrieved reference can carry
layout the caption does not mention.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

SIZE = 32
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "black")
# channel values are multiples of 1/255 so PPM round-trips are lossless
PALETTE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 0.8, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
])
SHAPES = ("circle", "square", "triangle")
SIZE_CLASSES = ("small", "large")
HALF_EXTENT = {0: 4.0, 1: 5.0}
CELLS = ("top-left", "top-center", "top-right",
         "middle-left", "center", "middle-right",
         "bottom-left", "bottom-center", "bottom-right")
FUNCTION_WORDS = ("and", "on", "background")
VOCAB = COLORS + SHAPES + CELLS + FUNCTION_WORDS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
MAX_CAPTION_LEN = 16
CAPTIONS_PER_IMAGE = 2


class SpecError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ObjectSpec:
    cell: int
    shape: int
    color: int
    size: int


@dataclass(frozen=True)
class SceneSpec:
    background: int
    objects: tuple[ObjectSpec, ...] = ()

    def validate(self) -> None:
        if not 0 <= self.background < len(COLORS):
            raise SpecError(f"background id {self.background} out of range")
        if len(self.objects) > 3:
            raise SpecError("at most 3 objects per scene")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise SpecError(f"objects share a grid cell: {cells}")
        for o in self.objects:
            if not (0 <= o.cell < 9 and 0 <= o.shape < len(SHAPES)
                    and 0 <= o.color < len(COLORS) and 0 <= o.size < 2):
                raise SpecError(f"object ids out of range: {o}")
            if o.color == self.background:
                raise SpecError("object color equals background color")

    def encode(self) -> str:
        objs = ";".join(f"{SHAPES[o.shape]}:{COLORS[o.color]}:{SIZE_CLASSES[o.size]}:{o.cell}"
                        for o in self.objects)
        return f"bg={COLORS[self.background]} objs={objs}"

    @classmethod
    def decode(cls, s: str) -> SceneSpec:
        parts = dict(p.split("=", 1) for p in s.split())
        objs = []
        for item in filter(None, parts.get("objs", "").split(";")):
            shape, color, size, cell = item.split(":")
            objs.append(ObjectSpec(int(cell), SHAPES.index(shape), COLORS.index(color), SIZE_CLASSES.index(size)))
        return cls(COLORS.index(parts["bg"]), tuple(objs))


@dataclass(frozen=True)
class Caption:
    tokens: tuple[int, ...]

    @property
    def text(self) -> str:
        return " ".join(VOCAB[t] for t in self.tokens)

    @classmethod
    def parse(cls, text: str) -> Caption:
        words = text.split()
        unknown = [w for w in words if w not in TOKEN_ID]
        if unknown:
            raise SpecError(f"unknown caption tokens: {unknown}")
        return cls(tuple(TOKEN_ID[w] for w in words))


@dataclass
class CorpusManifest:
    seed: int
    n_train: int
    n_test: int
    splits: list[str] = field(default_factory=list)
    specs: list[SceneSpec] = field(default_factory=list)
    captions_per_image: int = CAPTIONS_PER_IMAGE

    def to_text(self) -> str:
        lines = [
            f"seed = {self.seed}",
            f"n_train = {self.n_train}",
            f"n_test = {self.n_test}",
            f"captions_per_image = {self.captions_per_image}",
            f"vocab_size = {len(VOCAB)}",
        ]
        lines += [f"sample.{i} = {split} {spec.encode()}"
                  for i, (split, spec) in enumerate(zip(self.splits, self.specs))]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> CorpusManifest:
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        m = cls(int(kv["seed"]), int(kv["n_train"]), int(kv["n_test"]),
                captions_per_image=int(kv["captions_per_image"]))
        for i in range(m.n_train + m.n_test):
            split, rest = kv[f"sample.{i}"].split(" ", 1)
            m.splits.append(split)
            m.specs.append(SceneSpec.decode(rest))
        return m


@dataclass
class Corpus:
    images: np.ndarray                 # (N, 32, 32, 3) in [0, 1]
    captions: list[Caption]            # 2N, caption 2i+v describes image i
    manifest: CorpusManifest

    @property
    def train_images(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.manifest.splits) == "train")

    @property
    def test_images(self) -> np.ndarray:
        return np.flatnonzero(np.array(self.manifest.splits) == "test")

    def caption_ids(self, split: str) -> np.ndarray:
        imgs = self.train_images if split == "train" else self.test_images
        return (imgs[:, None] * CAPTIONS_PER_IMAGE + np.arange(CAPTIONS_PER_IMAGE)).reshape(-1)

    @staticmethod
    def image_of_caption(caption_index) -> np.ndarray | int:
        return np.asarray(caption_index) // CAPTIONS_PER_IMAGE


def cell_center(cell: int) -> tuple[float, float]:
    """(row, col) pixel coordinates of a grid cell's center."""
    r, c = divmod(cell, 3)
    step = SIZE / 3.0
    return (r + 0.5) * step, (c + 0.5) * step


def shape_mask(shape: int, size: int, cell: int) -> np.ndarray:
    cy, cx = cell_center(cell)
    h = HALF_EXTENT[size]
    py = np.arange(SIZE)[:, None] + 0.5
    px = np.arange(SIZE)[None, :] + 0.5
    in_box_y = (py >= cy - h) & (py < cy + h)
    in_box_x = (px >= cx - h) & (px < cx + h)
    if shape == 0:
        return (px - cx) ** 2 + (py - cy) ** 2 < h * h
    if shape == 1:
        return in_box_y & in_box_x
    # apex at the top, base along the bottom edge of the bounding box
    half_width = (py - (cy - h)) / 2.0
    return in_box_y & (np.abs(px - cx) <= half_width)


def render_scene(spec: SceneSpec) -> np.ndarray:
    spec.validate()
    img = np.empty((SIZE, SIZE, 3))
    img[:] = PALETTE[spec.background]
    for obj in sorted(spec.objects, key=lambda o: o.cell):
        img[shape_mask(obj.shape, obj.size, obj.cell)] = PALETTE[obj.color]
    return img


def caption_of(spec: SceneSpec, variant: int) -> Caption:
    if variant not in (0, 1):
        raise SpecError(f"caption variant must be 0 or 1, got {variant}")
    words: list[str] = []
    for i, obj in enumerate(sorted(spec.objects, key=lambda o: o.cell)):
        if i:
            words.append("and")
        words += [COLORS[obj.color], SHAPES[obj.shape]]
        if variant == 0:
            words.append(CELLS[obj.cell])
    words += ["on", COLORS[spec.background], "background"]
    return Caption(tuple(TOKEN_ID[w] for w in words))


def sample_spec(rng: Rng) -> SceneSpec:
    bg = int(rng.integers(len(COLORS)))
    n_obj = 1 + int(rng.integers(3))
    cells = rng.permutation(9)[:n_obj]
    others = [c for c in range(len(COLORS)) if c != bg]
    objs = []
    for cell in sorted(int(c) for c in cells):
        objs.append(ObjectSpec(cell=cell,
                               shape=int(rng.integers(len(SHAPES))),
                               color=others[int(rng.integers(len(others)))],
                               size=int(rng.integers(2))))
    return SceneSpec(bg, tuple(objs))


def generate_corpus(seed: int, n_train: int, n_test: int) -> Corpus:
    """Sample ``n_train + n_test`` scenes; sample ``i`` draws from its own
    stream keyed by ``(seed, i)``. Test scenes that duplicate a training
    scene are redrawn so the two image sets share no content."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    manifest = CorpusManifest(seed, n_train, n_test)
    train_seen: set[SceneSpec] = set()
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        attempt = 0
        while True:
            spec = sample_spec(Rng(seed, f"scene/{i}/{attempt}"))
            if split == "train" or spec not in train_seen:
                break
            attempt += 1
        if split == "train":
            train_seen.add(spec)
        manifest.splits.append(split)
        manifest.specs.append(spec)
    images = np.stack([render_scene(s) for s in manifest.specs])
    captions = [caption_of(s, v) for s in manifest.specs for v in range(CAPTIONS_PER_IMAGE)]
    return Corpus(images, captions, manifest)


# ------------------------------------------------------------------ disk I/O

def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: expected an 8-bit binary PPM (P6)")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "manifest.txt").write_text(corpus.manifest.to_text())
    for i, img in enumerate(corpus.images):
        write_ppm(d / "images" / f"{i:06d}.ppm", img)
    (d / "captions.txt").write_text("".join(c.text + "\n" for c in corpus.captions))


def load_corpus(directory: str | os.PathLike) -> Corpus:
    d = Path(directory)
    manifest = CorpusManifest.from_text((d / "manifest.txt").read_text())
    n = manifest.n_train + manifest.n_test
    images = np.stack([read_ppm(d / "images" / f"{i:06d}.ppm") for i in range(n)])
    captions = [Caption.parse(line) for line in (d / "captions.txt").read_text().splitlines() if line.strip()]
    if len(captions) != n * manifest.captions_per_image:
        raise ValueError(f"{d}: expected {n * manifest.captions_per_image} captions, found {len(captions)}")
    return Corpus(images, captions, manifest)

