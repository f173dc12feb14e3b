"""Counter-based 64-bit random stream.

Output ``i`` of a stream is ``mix(key, i)`` where ``mix`` is the SplitMix64
finalizer, so the whole state is the pair ``(key, counter)``. That makes
the generator trivially checkpointable and bit-reproducible on any
platform with IEEE doubles.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def derive_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Named, seedable stream. ``Rng(7, "train")`` and ``Rng(7, "corpus")``
    are independent; ``spawn`` derives child streams by name."""

    def __init__(self, seed: int, name: str = "main", *, key: int | None = None, counter: int = 0):
        self.seed = int(seed)
        self.name = name
        self.key = derive_key(seed, name) if key is None else int(key)
        self.counter = int(counter)

    def spawn(self, name: str) -> Rng:
        return Rng(self.seed, f"{self.name}/{name}")

    def raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            ctr = np.arange(self.counter, self.counter + n, dtype=np.uint64)
            x = (ctr + np.uint64(1)) * _GOLDEN ^ np.uint64(self.key)
            out = _splitmix(_splitmix(x))
        self.counter += n
        return out

    def uniform(self, shape: int | Sequence[int] = ()) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape: int | Sequence[int] = ()) -> np.ndarray:
        """Standard normals via Box-Muller; each pair of uniforms yields two."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1-u in (0, 1]
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def integers(self, high: int, shape: int | Sequence[int] = ()) -> np.ndarray:
        """Uniform integers in [0, high)."""
        n = int(np.prod(shape))
        out = (self.raw(n) % np.uint64(high)).astype(np.int64)
        return out.reshape(shape)

    def choice(self, seq: Sequence, size: int | None = None):
        if size is None:
            return seq[int(self.integers(len(seq)))]
        return [seq[i] for i in self.integers(len(seq), size)]

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of random keys is a uniform permutation
        return np.argsort(self.uniform(n), kind="stable")

    def state(self) -> tuple[int, int]:
        return self.key, self.counter

    def set_state(self, key: int, counter: int) -> None:
        self.key, self.counter = int(key), int(counter)
