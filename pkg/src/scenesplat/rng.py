"""Counter-based noise streams: every draw is keyed, never sequential.

A draw is addressed by (seed, substream path, frame index, timestep, tag) and
is served by a Philox generator seeded from exactly that key, so results do
not depend on draw order or parallel scheduling, and interrupted runs resume
bit-identically.
"""

from __future__ import annotations

import numpy as np

# Draw tags. Keep stable: they are part of the reproducibility contract.
TAG_INIT = 0
TAG_STEP_NOISE = 1
TAG_ANCHOR_NOISE = 2

# Substream labels used by the window enhancer.
STREAM_MOMENTUM_PASS = 0
STREAM_FREE_PASS = 1


class NoiseSource:
    """Deterministic Gaussian noise addressed by integer keys."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)

    def child(self, *path: int) -> "NoiseSource":
        return NoiseSource(self.seed, self.path + tuple(int(p) for p in path))

    def generator(self, *key: int) -> np.random.Generator:
        full = self.path + tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=full)
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, shape: tuple[int, ...], *key: int) -> np.ndarray:
        return self.generator(*key).standard_normal(shape)

    def __repr__(self) -> str:
        return f"NoiseSource(seed={self.seed}, path={self.path})"
