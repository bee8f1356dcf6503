"""
Deterministic splittable random streams.

Every stream is numpy's counter-based Philox generator keyed by a SeedSequence
built from the root seed and the CRC32 of each child label on the path, so a
child's draws never depend on how much any sibling has consumed.
"""

import zlib
from typing import Tuple

import numpy as np

MAX_SEED = 2 ** 64


class Rng:
    """Single-owner random stream; hand each worker its own `child`."""

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < MAX_SEED:
            raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.path = tuple(path)
        self._generator = None

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._generator = np.random.Generator(np.random.Philox(sequence))
        return self._generator

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (zlib.crc32(label.encode("utf-8")),))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
