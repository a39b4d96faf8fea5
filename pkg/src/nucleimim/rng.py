"""Seeded random streams with labelled, independent sub-streams."""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class Rng:
    """A PCG64 stream identified by a seed plus a path of string labels.

    ``child("mask")`` and ``child("init")`` give statistically independent
    streams; the same (seed, path) always reproduces the same draws.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed & (2**64 - 1),
                                     spawn_key=tuple(_label_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    # thin pass-throughs so call sites stay short
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)
