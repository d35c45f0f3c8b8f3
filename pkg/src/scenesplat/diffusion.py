"""Noise schedules, reverse-diffusion steps with latent momentum, codecs, toy denoisers.

Sampling is ancestral DDPM-style. The reverse step scales the denoised mean
by 1/sqrt(alpha_t) (the per-step coefficient); scaling by the cumulative
product instead amplifies the iterate without bound over a rollout, so the
per-step form is the only one whose sampled marginals match the forward
process.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import ImageFrame, InvalidParameterError, LatentVideo, SceneSplatError, VideoClip
from .rng import TAG_ANCHOR_NOISE, TAG_INIT, TAG_STEP_NOISE, NoiseSource


class DenoiserContractError(SceneSplatError):
    """A denoiser violated its call contract (usually an output shape mismatch)."""


class TrainingError(SceneSplatError):
    """Toy-denoiser training diverged."""


class DenoiserInterface(Protocol):
    def __call__(self, z_t: np.ndarray, t: int, condition) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion constants. beta/sigma are indexed by t-1; alpha_bar by t with
    alpha_bar[0] = 1 so the final reverse step lands on the clean manifold."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(1.0 - self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[t - 1])


def build_schedule(
    T: int, beta_min: float = 1e-4, beta_max: float = 0.02, deterministic: bool = False,
) -> NoiseSchedule:
    """Linear beta ramp; sigma_t = sqrt(beta_t), or 0 in deterministic mode."""
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidParameterError("need 0 < beta_min <= beta_max < 1")
    beta = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    sigma = np.zeros(T) if deterministic else np.sqrt(beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def _latent_array(z) -> np.ndarray:
    if isinstance(z, LatentVideo):
        return z.latents
    return np.asarray(z, dtype=np.float64)


def _check_t(t: int, schedule: NoiseSchedule, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if not lo <= t <= schedule.T:
        raise InvalidParameterError(f"timestep {t} outside [{lo}, {schedule.T}]")


def q_sample(z0, t: int, eps, schedule: NoiseSchedule):
    """Forward noising: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. t=0 returns z0."""
    _check_t(t, schedule, allow_zero=True)
    arr = _latent_array(z0)
    noise = np.asarray(eps, dtype=np.float64)
    if noise.shape != arr.shape:
        raise InvalidParameterError(f"noise shape {noise.shape} != latent shape {arr.shape}")
    ab = schedule.alpha_bar_at(t)
    out = np.sqrt(ab) * arr + np.sqrt(1.0 - ab) * noise
    if isinstance(z0, LatentVideo):
        return z0.with_latents(out)
    return out


def _frame_keys(num_frames: int, frame_indices) -> list[int]:
    if frame_indices is None:
        return list(range(1, num_frames + 1))
    keys = [int(i) for i in frame_indices]
    if len(keys) != num_frames:
        raise InvalidParameterError("frame_indices must match the latent frame count")
    return keys


def _frame_noise(shape, frame_keys, t: int, tag: int, rng: NoiseSource) -> np.ndarray:
    out = np.empty(shape)
    for row, key in enumerate(frame_keys):
        out[row] = rng.normal(shape[1:], key, t, tag)
    return out


def _predict_noise(denoiser, z_t: np.ndarray, t: int, condition) -> np.ndarray:
    eps_hat = np.asarray(denoiser(z_t, t, condition), dtype=np.float64)
    if eps_hat.shape != z_t.shape:
        raise DenoiserContractError(
            f"denoiser returned shape {eps_hat.shape}, expected {z_t.shape}")
    return eps_hat


def vanilla_reverse_step(
    z_t, t: int, denoiser, condition, schedule: NoiseSchedule, rng: NoiseSource,
    frame_indices=None,
):
    """One ancestral step; the stochastic term is dropped at t = 1."""
    _check_t(t, schedule)
    arr = _latent_array(z_t)
    eps_hat = _predict_noise(denoiser, arr, t, condition)
    beta = schedule.beta_at(t)
    ab = schedule.alpha_bar_at(t)
    mean = (arr - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(schedule.alpha_at(t))
    sigma = schedule.sigma_at(t)
    if t > 1 and sigma > 0.0:
        keys = _frame_keys(arr.shape[0], frame_indices)
        mean = mean + sigma * _frame_noise(arr.shape, keys, t, TAG_STEP_NOISE, rng)
    if isinstance(z_t, LatentVideo):
        return z_t.with_latents(mean)
    return mean


@dataclass(frozen=True)
class LatentMomentumField:
    """Per-frame, per-location momentum coefficients in [0, lambda0]."""

    values: np.ndarray
    lambda0: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise InvalidParameterError("momentum field must have shape (N, h, w)")
        if vals.min() < 0.0 or vals.max() > self.lambda0 + 1e-12:
            raise InvalidParameterError("momentum values must lie in [0, lambda0]")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def reference_pool(input_latent: np.ndarray, well_generated: np.ndarray) -> np.ndarray:
    """Flatten the input-image latent plus the first n frame latents into
    one (P, C) bank of reference vectors. Duplicates are kept."""
    z0 = np.asarray(input_latent, dtype=np.float64)
    well = np.asarray(well_generated, dtype=np.float64)
    channels = z0.shape[-1]
    return np.concatenate([z0.reshape(-1, channels), well.reshape(-1, channels)], axis=0)


def latent_momentum_coefficients(z, pool: np.ndarray, lambda0: float) -> LatentMomentumField:
    """lambda0 * clamp(max cosine similarity against the pool, 0, 1) per location.

    Zero vectors (in the latents or the pool) have cosine 0 by convention.
    """
    if not 0.0 <= lambda0 <= 1.0:
        raise InvalidParameterError("lambda0 must lie in [0, 1]")
    arr = _latent_array(z)
    if pool.size == 0:
        raise InvalidParameterError("reference pool must be non-empty")
    n, h, w, c = arr.shape
    flat = arr.reshape(-1, c)
    flat_norm = np.linalg.norm(flat, axis=1, keepdims=True)
    pool_norm = np.linalg.norm(pool, axis=1, keepdims=True)
    flat_unit = np.where(flat_norm > 0, flat / np.where(flat_norm > 0, flat_norm, 1.0), 0.0)
    pool_unit = np.where(pool_norm > 0, pool / np.where(pool_norm > 0, pool_norm, 1.0), 0.0)
    best = (flat_unit @ pool_unit.T).max(axis=1)
    lam = lambda0 * np.clip(best, 0.0, 1.0)
    return LatentMomentumField(lam.reshape(n, h, w), lambda0)


def momentum_reverse_step(
    z_t, t: int, z_anchor, lambda_field, denoiser, condition,
    schedule: NoiseSchedule, rng: NoiseSource, frame_indices=None,
    noise_convention: str = "as-printed",
):
    """Convex blend of a re-noised anchor and the vanilla ancestral step.

    The anchor noise coefficient is (1 - sqrt(abar_{t-1})) under the default
    "as-printed" convention, or sqrt(1 - abar_{t-1}) under
    "forward-consistent". Locations with a momentum coefficient of exactly 0
    return the vanilla step bit-for-bit.
    """
    _check_t(t, schedule)
    arr = _latent_array(z_t)
    anchor_arr = _latent_array(z_anchor)
    if anchor_arr.shape != arr.shape:
        raise InvalidParameterError("anchor latents must match the iterate's shape")
    lam = lambda_field.values if isinstance(lambda_field, LatentMomentumField) else np.asarray(lambda_field)
    if lam.shape != arr.shape[:3]:
        raise InvalidParameterError("momentum field must have shape (N, h, w)")

    keys = _frame_keys(arr.shape[0], frame_indices)
    if t > 1:
        eps = _frame_noise(arr.shape, keys, t, TAG_ANCHOR_NOISE, rng)
    else:
        eps = np.zeros_like(arr)
    ab_prev = schedule.alpha_bar_at(t - 1)
    if noise_convention == "as-printed":
        coef = 1.0 - np.sqrt(ab_prev)
    elif noise_convention == "forward-consistent":
        coef = np.sqrt(1.0 - ab_prev)
    else:
        raise InvalidParameterError(f"unknown noise convention {noise_convention!r}")
    anchor = np.sqrt(ab_prev) * anchor_arr + coef * eps

    vanilla = _latent_array(
        vanilla_reverse_step(arr, t, denoiser, condition, schedule, rng, frame_indices)
    )
    lam_b = lam[..., None]
    blended = lam_b * anchor + (1.0 - lam_b) * vanilla
    out = np.where(lam_b == 0.0, vanilla, blended)
    if isinstance(z_t, LatentVideo):
        return z_t.with_latents(out)
    return out


def sample_ancestral(
    shape: tuple[int, ...], denoiser, condition, schedule: NoiseSchedule,
    rng: NoiseSource, frame_indices=None,
) -> np.ndarray:
    """Plain rollout from pure noise to clean latents."""
    keys = _frame_keys(shape[0], frame_indices)
    z = _frame_noise(shape, keys, 0, TAG_INIT, rng)
    for t in range(schedule.T, 0, -1):
        z = vanilla_reverse_step(z, t, denoiser, condition, schedule, rng, frame_indices)
    return z


def sample_phi(
    rendered: VideoClip, input_image: ImageFrame, n_well: int, lambda0: float,
    codec, denoiser, schedule: NoiseSchedule, rng: NoiseSource,
    noise_convention: str = "as-printed",
) -> VideoClip:
    """Momentum-guided generation conditioned on the rendered clip.

    Encodes the clip and input image, builds the reference pool from the
    input latent plus the first n_well frame latents, fixes the momentum
    field once, then runs the full reverse chain from pure noise and decodes.
    lambda0 = 0 degenerates to the plain ancestral sampler.
    """
    if not 0 <= n_well <= len(rendered):
        raise InvalidParameterError("n_well must lie in [0, num frames]")
    anchor = codec.encode(rendered)
    z0 = codec.encode_image(input_image)
    pool = reference_pool(z0, anchor.latents[:n_well])
    lam = latent_momentum_coefficients(anchor, pool, lambda0)
    keys = list(rendered.frame_indices)
    z = _frame_noise(anchor.latents.shape, keys, 0, TAG_INIT, rng)
    for t in range(schedule.T, 0, -1):
        z = momentum_reverse_step(
            z, t, anchor.latents, lam, denoiser, z0, schedule, rng,
            frame_indices=keys, noise_convention=noise_convention,
        )
    return codec.decode(anchor.with_latents(z), rendered.frame_indices)


# ---------------------------------------------------------------------------
# Latent codecs


class IdentityCodec:
    """Maps [0,1] RGB to [-1,1] channels pointwise; C=3, no downsampling."""

    downsample = 1
    channels = 3

    def encode_image(self, image: ImageFrame) -> np.ndarray:
        return 2.0 * image.pixels - 1.0

    def encode(self, clip: VideoClip) -> LatentVideo:
        return LatentVideo(2.0 * clip.as_array() - 1.0, downsample=1)

    def decode(self, latents: LatentVideo, frame_indices: Sequence[int]) -> VideoClip:
        arr = np.clip((latents.latents + 1.0) * 0.5, 0.0, 1.0)
        return VideoClip.from_array(arr, frame_indices)


class PatchCodec:
    """Losslessly folds f x f x 3 pixel blocks into 3f^2 channels (plus the
    same [-1,1] range map); a stand-in for a spatially downsampling encoder."""

    def __init__(self, factor: int):
        if factor < 1:
            raise InvalidParameterError("patch factor must be >= 1")
        self.downsample = int(factor)
        self.channels = 3 * factor * factor

    def _fold(self, frames: np.ndarray) -> np.ndarray:
        n, h, w, _ = frames.shape
        f = self.downsample
        if h % f or w % f:
            raise InvalidParameterError(f"image size {h}x{w} not divisible by {f}")
        folded = frames.reshape(n, h // f, f, w // f, f, 3)
        folded = folded.transpose(0, 1, 3, 2, 4, 5).reshape(n, h // f, w // f, self.channels)
        return 2.0 * folded - 1.0

    def encode_image(self, image: ImageFrame) -> np.ndarray:
        return self._fold(image.pixels[None])[0]

    def encode(self, clip: VideoClip) -> LatentVideo:
        return LatentVideo(self._fold(clip.as_array()), downsample=self.downsample)

    def decode(self, latents: LatentVideo, frame_indices: Sequence[int]) -> VideoClip:
        f = self.downsample
        arr = (latents.latents + 1.0) * 0.5
        n, hs, ws, _ = arr.shape
        frames = arr.reshape(n, hs, ws, f, f, 3).transpose(0, 1, 3, 2, 4, 5)
        frames = frames.reshape(n, hs * f, ws * f, 3)
        return VideoClip.from_array(np.clip(frames, 0.0, 1.0), frame_indices)


def get_codec(key: str):
    if key == "identity":
        return IdentityCodec()
    if key.startswith("patch:"):
        return PatchCodec(int(key.split(":", 1)[1]))
    raise InvalidParameterError(f"unknown codec {key!r}")


# ---------------------------------------------------------------------------
# Denoisers


class ZeroDenoiser:
    """Predicts zero noise everywhere."""

    def __call__(self, z_t: np.ndarray, t: int, condition) -> np.ndarray:
        return np.zeros_like(z_t)


class OracleDenoiser:
    """Inverts the forward noising against a known clean target."""

    def __init__(self, target, schedule: NoiseSchedule):
        self.target = _latent_array(target)
        self.schedule = schedule

    def __call__(self, z_t: np.ndarray, t: int, condition) -> np.ndarray:
        ab = self.schedule.alpha_bar_at(t)
        return (z_t - np.sqrt(ab) * self.target) / np.sqrt(1.0 - ab)


def oracle_denoiser(target, schedule: NoiseSchedule) -> OracleDenoiser:
    return OracleDenoiser(target, schedule)


class ConditionOracleDenoiser:
    """Oracle whose target is the condition tensor, broadcast over frames.

    Unlike OracleDenoiser this needs no out-of-band state, so it can be
    reproduced by an out-of-process denoiser that only sees the request.
    """

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule

    def __call__(self, z_t: np.ndarray, t: int, condition) -> np.ndarray:
        target = np.broadcast_to(np.asarray(condition, dtype=np.float64), z_t.shape)
        ab = self.schedule.alpha_bar_at(t)
        return (z_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


class GaussianScoreDenoiser:
    """Exact noise predictor when the clean data is N(mean, std^2 I).

    Derivation: with x0 ~ N(m, s^2 I) and x_t = sqrt(abar) x0 +
    sqrt(1-abar) eps, the marginal is x_t ~ N(sqrt(abar) m, v I) with
    v = abar s^2 + 1 - abar. Its score is grad log p_t(x) =
    -(x - sqrt(abar) m) / v, and the minimizer of the noise-matching
    objective is eps_hat = -sqrt(1-abar) * score, i.e.

        eps_hat(x, t) = sqrt(1-abar) (x - sqrt(abar) m) / (abar s^2 + 1 - abar).

    At s = 0 this reduces to the fixed-target oracle.
    """

    def __init__(self, mean, std: float, schedule: NoiseSchedule):
        if std < 0:
            raise InvalidParameterError("std must be non-negative")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = float(std)
        self.schedule = schedule

    def __call__(self, z_t: np.ndarray, t: int, condition) -> np.ndarray:
        ab = self.schedule.alpha_bar_at(t)
        variance = ab * self.std**2 + 1.0 - ab
        return np.sqrt(1.0 - ab) * (z_t - np.sqrt(ab) * self.mean) / variance


def gaussian_score_denoiser(mean, std: float, schedule: NoiseSchedule) -> GaussianScoreDenoiser:
    return GaussianScoreDenoiser(mean, std, schedule)


class AffineDenoiser:
    """Per-timestep affine family eps_hat = a[t] * z + b[t]; b is per-location."""

    def __init__(self, a: np.ndarray, b: np.ndarray, schedule: NoiseSchedule,
                 loss_history: list[float] | None = None):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.schedule = schedule
        self.loss_history = list(loss_history or [])

    def __call__(self, z_t: np.ndarray, t: int, condition) -> np.ndarray:
        return self.a[t] * z_t + self.b[t]

    def save(self, path: str | Path) -> None:
        np.savez(path, a=self.a, b=self.b, beta=self.schedule.beta,
                 sigma=self.schedule.sigma, loss_history=np.asarray(self.loss_history))

    @classmethod
    def load(cls, path: str | Path) -> "AffineDenoiser":
        data = np.load(path)
        beta = data["beta"]
        schedule = NoiseSchedule(
            T=beta.size, beta=beta,
            alpha_bar=np.concatenate([[1.0], np.cumprod(1.0 - beta)]),
            sigma=data["sigma"],
        )
        return cls(data["a"], data["b"], schedule, list(data["loss_history"]))


def train_toy_denoiser(
    dataset: Sequence[np.ndarray], schedule: NoiseSchedule, epochs: int,
    rng: NoiseSource | None = None, learning_rate: float = 0.1,
    draws_per_step: int = 4,
) -> AffineDenoiser:
    """Fit the affine family by stochastic minimization of the noise-matching
    objective E ||eps - eps_hat(x_t, t)||^2.

    Each epoch sweeps every timestep once per dataset item (shuffled order);
    gradients and the recorded loss average over ``draws_per_step`` fresh
    noise draws. The history holds one mean loss per epoch. epochs = 0
    returns the zero-initialized family untouched.
    """
    samples = [np.asarray(d, dtype=np.float64) for d in dataset]
    if not samples:
        raise InvalidParameterError("dataset must be non-empty")
    shape = samples[0].shape
    if any(s.shape != shape for s in samples):
        raise InvalidParameterError("all dataset latents must share one shape")
    rng = rng or NoiseSource(0)
    a = np.zeros(schedule.T + 1)
    b = np.zeros((schedule.T + 1,) + shape)
    history: list[float] = []
    for epoch in range(epochs):
        losses = []
        for si, sample in enumerate(samples):
            gen = rng.generator(3, epoch, si)
            for t in gen.permutation(schedule.T) + 1:
                t = int(t)
                eps = gen.standard_normal((draws_per_step,) + shape)
                z_t = q_sample(np.broadcast_to(sample, eps.shape), t, eps, schedule)
                resid = a[t] * z_t + b[t] - eps
                loss = float(np.mean(resid**2))
                if not np.isfinite(loss):
                    raise TrainingError(f"loss diverged at epoch {epoch}, t={t}")
                losses.append(loss)
                # Scalar gain trained on the mean objective, per-location bias
                # on its own elementwise residual (averaged over draws).
                a[t] -= learning_rate * 2.0 * float(np.mean(resid * z_t))
                b[t] -= learning_rate * 2.0 * resid.mean(axis=0)
        history.append(float(np.mean(losses)))
    return AffineDenoiser(a, b, schedule, history)


def denoising_loss(denoiser, samples: Sequence[np.ndarray], schedule: NoiseSchedule,
                   rng: NoiseSource, draws: int = 64) -> float:
    """Monte-Carlo estimate of the noise-matching objective for a denoiser."""
    total = 0.0
    for k in range(draws):
        gen = rng.generator(7, k)
        sample = samples[int(gen.integers(0, len(samples)))]
        t = int(gen.integers(1, schedule.T + 1))
        eps = gen.standard_normal(sample.shape)
        z_t = q_sample(sample, t, eps, schedule)
        pred = np.asarray(denoiser(z_t, t, None), dtype=np.float64)
        total += float(np.mean((pred - eps) ** 2))
    return total / draws
