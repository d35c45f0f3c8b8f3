"""Pixel-level momentum: scale-map thresholding and the two-pass video blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianScene, ImageFrame, InvalidParameterError, PipelineConfig, Trajectory, VideoClip
from .diffusion import build_schedule, sample_phi
from .render import RenderStats, ScaleMap, render_scale_map, render_video
from .rng import STREAM_FREE_PASS, STREAM_MOMENTUM_PASS, NoiseSource


@dataclass(frozen=True)
class PixelMomentumField:
    """Per-frame, per-pixel blend weights in [0, 1); zero below the threshold."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise InvalidParameterError("pixel momentum must have shape (N, H, W)")
        if vals.min() < 0.0 or vals.max() >= 1.0:
            raise InvalidParameterError("pixel momentum entries must lie in [0, 1)")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def _maps_array(scale_maps) -> np.ndarray:
    if isinstance(scale_maps, np.ndarray):
        arr = scale_maps
    else:
        arr = np.stack([m.values if isinstance(m, ScaleMap) else np.asarray(m)
                        for m in scale_maps])
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise InvalidParameterError("scale maps must stack to shape (N, H, W, 3)")
    return arr


def pixel_momentum_field(scale_maps, tau: float) -> PixelMomentumField:
    """Channel maximum of each scale map, hard-thresholded at tau."""
    if not 0.0 <= tau < 1.0:
        raise InvalidParameterError("tau must lie in [0, 1)")
    peak = _maps_array(scale_maps).max(axis=3)
    return PixelMomentumField(np.where(peak >= tau, peak, 0.0))


def cascade_blend(consistent: VideoClip, free: VideoClip, mu: PixelMomentumField) -> VideoClip:
    """Per-pixel convex blend mu*consistent + (1-mu)*free, broadcast over RGB.

    Pixels with mu exactly 0 return the free clip's value bit-for-bit.
    """
    a = consistent.as_array()
    b = free.as_array()
    m = mu.values[..., None]
    if a.shape != b.shape or m.shape[:3] != a.shape[:3]:
        raise InvalidParameterError("clips and momentum field must share (N, H, W)")
    blended = np.where(m == 0.0, b, m * a + (1.0 - m) * b)
    return VideoClip.from_array(np.clip(blended, 0.0, 1.0), consistent.frame_indices)


@dataclass
class EnhanceResult:
    """Everything the window enhancer produces, kept for inspection dumps."""

    rendered: VideoClip
    consistent: VideoClip
    free: VideoClip
    scale_maps: list[ScaleMap]
    momentum: PixelMomentumField
    blended: VideoClip


def enhance_window_detailed(
    scene: GaussianScene,
    window_cameras: Trajectory,
    input_image: ImageFrame,
    n_well: int,
    config: PipelineConfig,
    denoiser,
    codec,
    rng: NoiseSource,
    frame_indices=None,
    stats: RenderStats | None = None,
) -> EnhanceResult:
    """Render the window, run the momentum and free generations, blend them.

    The two generations run on independent sub-streams of ``rng`` and share
    one denoiser. ``denoiser`` may also be a factory with a ``build`` method
    taking the encoded rendered clip (used by target-tracking test denoisers).
    """
    if config.s_max is None:
        raise InvalidParameterError("config.s_max must be resolved before enhancement")
    if frame_indices is None:
        frame_indices = tuple(range(1, len(window_cameras) + 1))
    rendered = render_video(scene, window_cameras, config.background,
                            frame_indices=frame_indices, stats=stats)
    scale_maps = [render_scale_map(scene, cam, config.s_max, stats=stats)
                  for cam in window_cameras.cameras]
    actual = denoiser.build(codec.encode(rendered)) if hasattr(denoiser, "build") else denoiser
    schedule = build_schedule(config.diffusion_steps, config.beta_min, config.beta_max,
                              config.deterministic_sampling)
    consistent = sample_phi(
        rendered, input_image, n_well, config.lambda0, codec, actual, schedule,
        rng.child(STREAM_MOMENTUM_PASS), noise_convention=config.momentum_noise_convention,
    )
    free = sample_phi(
        rendered, input_image, n_well, 0.0, codec, actual, schedule,
        rng.child(STREAM_FREE_PASS), noise_convention=config.momentum_noise_convention,
    )
    momentum = pixel_momentum_field(scale_maps, config.tau)
    blended = cascade_blend(consistent, free, momentum)
    return EnhanceResult(rendered, consistent, free, scale_maps, momentum, blended)


def enhance_window(
    scene: GaussianScene,
    window_cameras: Trajectory,
    input_image: ImageFrame,
    n_well: int,
    config: PipelineConfig,
    denoiser,
    codec,
    rng: NoiseSource,
    frame_indices=None,
) -> VideoClip:
    return enhance_window_detailed(
        scene, window_cameras, input_image, n_well, config, denoiser, codec, rng,
        frame_indices=frame_indices,
    ).blended
