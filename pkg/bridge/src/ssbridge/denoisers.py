"""Denoisers the server can wrap, plus the schedule constants they need.

The oracle variants predict eps_hat = (z - sqrt(abar_t) * target) /
sqrt(1 - abar_t); the gaussian variant is the exact predictor for
N(mean, std^2) data. Targets can come from the request's condition tensor or
from a tensor file, so the server never needs the caller's process state.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class Schedule:
    """Linear beta ramp with abar[0] = 1, mirrored from the caller's config."""

    def __init__(self, timesteps: int, beta_min: float = 1e-4, beta_max: float = 0.02):
        if timesteps < 1 or not 0 < beta_min <= beta_max < 1:
            raise ValueError("bad schedule parameters")
        beta = np.linspace(beta_min, beta_max, timesteps)
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[t])


def load_tensor_file(path: str | Path) -> np.ndarray:
    """Reader for the caller's flat tensor format (magic SSTF)."""
    data = Path(path).read_bytes()
    if data[:4] != b"SSTF":
        raise ValueError(f"{path}: not a tensor file")
    rank, tag = struct.unpack("<BB", data[4:6])
    dtype = {0: "<f4", 1: "<f8"}[tag]
    dims = struct.unpack(f"<{rank}Q", data[16:16 + 8 * rank])
    count = 1
    for d in dims:
        count *= d
    return np.frombuffer(data, dtype=dtype, count=count, offset=16 + 8 * rank) \
        .reshape(dims).astype(np.float64)


class ZeroDenoiser:
    def __call__(self, z_t, t, condition):
        return np.zeros_like(z_t)


class ConditionOracleDenoiser:
    """Targets the request's condition tensor, broadcast over frames."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule

    def __call__(self, z_t, t, condition):
        if condition is None or condition.size == 0:
            raise ValueError("condition-oracle needs a condition tensor")
        target = np.broadcast_to(condition, z_t.shape)
        ab = self.schedule.abar(t)
        return (z_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


class FileOracleDenoiser:
    """Targets fixed latents loaded from a tensor file."""

    def __init__(self, schedule: Schedule, path: str | Path):
        self.schedule = schedule
        self.target = load_tensor_file(path)

    def __call__(self, z_t, t, condition):
        ab = self.schedule.abar(t)
        return (z_t - np.sqrt(ab) * np.broadcast_to(self.target, z_t.shape)) / np.sqrt(1.0 - ab)


class GaussianScoreDenoiser:
    def __init__(self, schedule: Schedule, mean: float, std: float):
        self.schedule = schedule
        self.mean = float(mean)
        self.std = float(std)

    def __call__(self, z_t, t, condition):
        ab = self.schedule.abar(t)
        variance = ab * self.std**2 + 1.0 - ab
        return np.sqrt(1.0 - ab) * (z_t - np.sqrt(ab) * self.mean) / variance


def build_denoiser(key: str, schedule: Schedule):
    if key == "zero":
        return ZeroDenoiser()
    if key == "condition-oracle":
        return ConditionOracleDenoiser(schedule)
    if key.startswith("oracle-file:"):
        return FileOracleDenoiser(schedule, key.split(":", 1)[1])
    if key.startswith("gaussian:"):
        mean, std = key.split(":", 1)[1].split(",")
        return GaussianScoreDenoiser(schedule, float(mean), float(std))
    raise ValueError(f"unknown denoiser key {key!r}")
