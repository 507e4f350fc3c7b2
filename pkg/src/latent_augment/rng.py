"""Seeded random streams.

Every consumer asks for a stream by label, e.g. ``Rng(7).generator("stage1", "init")``.
Labels are hashed into the ``SeedSequence`` entropy, so streams are stable across
processes and independent of the order in which they are requested.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class Rng:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *labels: str | int) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(x) for x in labels))

    def generator(self, *labels: str | int) -> np.random.Generator:
        full = self.path + tuple(str(x) for x in labels)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for label in full:
            entropy.extend(_label_words(label))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def gaussian_sample(rng: Rng | np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """I.i.d. standard normal ``rows x cols`` matrix."""
    gen = rng.generator() if isinstance(rng, Rng) else rng
    return gen.standard_normal((rows, cols))
