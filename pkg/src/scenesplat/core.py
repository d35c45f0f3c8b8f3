"""Core domain types: Gaussian primitives and scenes, cameras, frames, latents, config."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

SCALE_EPS = 1e-7
QUAT_NORM_TOL = 1e-6
ROTATION_ORTHO_TOL = 1e-6


class SceneSplatError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(SceneSplatError):
    """An argument violates a documented precondition."""


def _as_float_array(x, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidParameterError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for quaternion (w, x, y, z); q is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise InvalidParameterError("quaternion must be finite and non-zero")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def covariance_matrix(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """3x3 world covariance from per-axis extents and an orientation quaternion.

    Built as M M^T with M = R diag(scale), so the result is symmetric
    positive-definite whenever the scale is strictly positive.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,) or not np.all(np.isfinite(scale)) or np.any(scale <= 0):
        raise InvalidParameterError("scale must be a finite, strictly positive 3-vector")
    rot = quaternion_to_rotation(rotation)
    m = rot * scale[np.newaxis, :]
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def sh_coefficient_count(degree: int) -> int:
    if degree not in (0, 1, 2):
        raise InvalidParameterError(f"sh degree must be 0, 1 or 2, got {degree}")
    return (degree + 1) ** 2


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian: position, per-axis scale, orientation, opacity, color.

    The rotation quaternion is renormalized on construction. Color holds
    spherical-harmonics coefficients with shape (num_coeffs, 3); at degree 0
    the single coefficient row is the plain RGB color.
    """

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        pos = _as_float_array(self.position, (3,), "position")
        if not np.all(np.isfinite(pos)):
            raise InvalidParameterError("position must be finite")
        scale = _as_float_array(self.scale, (3,), "scale")
        if not np.all(np.isfinite(scale)) or np.any(scale < SCALE_EPS):
            raise InvalidParameterError(f"scale components must be finite and >= {SCALE_EPS}")
        quat = np.asarray(self.rotation, dtype=np.float64)
        if quat.shape != (4,):
            raise InvalidParameterError("rotation must be a quaternion (w, x, y, z)")
        norm = np.linalg.norm(quat)
        if not np.isfinite(norm) or norm == 0.0:
            raise InvalidParameterError("rotation quaternion must be finite and non-zero")
        quat = quat / norm
        if not (0.0 <= self.opacity < 1.0):
            raise InvalidParameterError("opacity must lie in [0, 1)")
        color = np.asarray(self.color, dtype=np.float64)
        if color.ndim == 1:
            color = color.reshape(1, 3) if color.size == 3 else color
        if color.ndim != 2 or color.shape[1] != 3 or color.shape[0] not in (1, 4, 9):
            raise InvalidParameterError("color must have shape (num_coeffs, 3) with 1, 4 or 9 rows")
        if not np.all(np.isfinite(color)):
            raise InvalidParameterError("color coefficients must be finite")
        object.__setattr__(self, "position", _freeze(pos))
        object.__setattr__(self, "scale", _freeze(scale))
        object.__setattr__(self, "rotation", _freeze(quat))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "color", _freeze(color))

    @property
    def sh_degree(self) -> int:
        return {1: 0, 4: 1, 9: 2}[self.color.shape[0]]

    def covariance(self) -> np.ndarray:
        return covariance_matrix(self.scale, self.rotation)


@dataclass(frozen=True)
class GaussianScene:
    """An ordered collection of Gaussian primitives stored as packed arrays.

    Arrays: positions (N,3), scales (N,3), rotations (N,4) as (w,x,y,z)
    quaternions, opacities (N,), colors (N,K,3) with K = (sh_degree+1)^2.
    Instances are immutable; derive modified scenes with ``with_arrays``.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    sh_degree: int = 0
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0] if np.asarray(self.positions).ndim == 2 else -1
        k = sh_coefficient_count(self.sh_degree)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if n >= 0 and pos.shape[0] != n:
            raise InvalidParameterError("positions must have shape (N, 3)")
        n = pos.shape[0]
        scales = _as_float_array(self.scales, (n, 3), "scales")
        rots = _as_float_array(self.rotations, (n, 4), "rotations")
        ops = _as_float_array(self.opacities, (n,), "opacities")
        cols = _as_float_array(self.colors, (n, k, 3), "colors")
        object.__setattr__(self, "positions", _freeze(pos))
        object.__setattr__(self, "scales", _freeze(scales))
        object.__setattr__(self, "rotations", _freeze(rots))
        object.__setattr__(self, "opacities", _freeze(ops))
        object.__setattr__(self, "colors", _freeze(cols))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def from_primitives(
        cls,
        primitives: Sequence[GaussianPrimitive],
        sh_degree: int | None = None,
        metadata: Mapping[str, Any] | None = None,
    ) -> "GaussianScene":
        if sh_degree is None:
            sh_degree = primitives[0].sh_degree if primitives else 0
        k = sh_coefficient_count(sh_degree)
        n = len(primitives)
        positions = np.zeros((n, 3))
        scales = np.zeros((n, 3))
        rotations = np.zeros((n, 4))
        opacities = np.zeros(n)
        colors = np.zeros((n, k, 3))
        for i, p in enumerate(primitives):
            if p.color.shape[0] != k:
                raise InvalidParameterError("all primitives must share the scene sh_degree")
            positions[i] = p.position
            scales[i] = p.scale
            rotations[i] = p.rotation
            opacities[i] = p.opacity
            colors[i] = p.color
        return cls(positions, scales, rotations, opacities, colors, sh_degree, metadata or {})

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        k = sh_coefficient_count(sh_degree)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
            np.zeros(0), np.zeros((0, k, 3)), sh_degree,
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        return (self[i] for i in range(len(self)))

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i], self.scales[i], self.rotations[i],
            float(self.opacities[i]), self.colors[i],
        )

    @property
    def primitives(self) -> tuple[GaussianPrimitive, ...]:
        return tuple(self)

    def with_arrays(self, **updates: np.ndarray) -> "GaussianScene":
        fields = dict(
            positions=self.positions, scales=self.scales, rotations=self.rotations,
            opacities=self.opacities, colors=self.colors,
        )
        for key, value in updates.items():
            if key not in fields:
                raise InvalidParameterError(f"unknown scene array {key!r}")
            fields[key] = value
        return GaussianScene(sh_degree=self.sh_degree, metadata=self.metadata, **fields)

    def extent(self) -> float:
        """Radius of the bounding sphere around the position centroid."""
        if len(self) == 0:
            return 1.0
        centered = self.positions - self.positions.mean(axis=0)
        return float(max(np.linalg.norm(centered, axis=1).max(), 1e-12))


@dataclass(frozen=True)
class Violation:
    """One invariant breach found by validate_scene."""

    primitive_index: int | None
    field: str
    message: str

    def __str__(self) -> str:
        where = "scene" if self.primitive_index is None else f"primitive {self.primitive_index}"
        return f"{where}.{self.field}: {self.message}"


def validate_scene(scene: GaussianScene) -> list[Violation]:
    """Check every primitive invariant; violations are returned, never raised."""
    out: list[Violation] = []

    def flag(mask: np.ndarray, fieldname: str, message: str) -> None:
        for idx in np.flatnonzero(mask):
            out.append(Violation(int(idx), fieldname, message))

    flag(~np.isfinite(scene.positions).all(axis=1), "position", "non-finite component")
    bad_scale = ~np.isfinite(scene.scales).all(axis=1) | (scene.scales < SCALE_EPS).any(axis=1)
    flag(bad_scale, "scale", f"components must be finite and >= {SCALE_EPS}")
    norms = np.linalg.norm(scene.rotations, axis=1)
    flag(~np.isfinite(norms) | (np.abs(norms - 1.0) > QUAT_NORM_TOL), "rotation",
         "quaternion norm must be 1 within 1e-6")
    bad_op = ~np.isfinite(scene.opacities) | (scene.opacities < 0) | (scene.opacities >= 1)
    flag(bad_op, "opacity", "must lie in [0, 1)")
    flag(~np.isfinite(scene.colors).all(axis=(1, 2)), "color", "non-finite coefficient")
    return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # 3x3, world-to-camera
    translation: np.ndarray  # 3-vector

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("resolution must be at least 1x1")
        rot = _as_float_array(self.rotation, (3, 3), "rotation")
        if np.abs(rot @ rot.T - np.eye(3)).max() > ROTATION_ORTHO_TOL:
            raise InvalidParameterError("rotation must be orthonormal within 1e-6")
        t = _as_float_array(self.translation, (3,), "translation")
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "rotation", _freeze(rot))
        object.__setattr__(self, "translation", _freeze(t))

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def resolution(self) -> tuple[int, int]:
        return self.width, self.height


@dataclass(frozen=True)
class Trajectory:
    """Ordered camera path; frame arithmetic throughout the pipeline is 1-indexed."""

    cameras: tuple[Camera, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise InvalidParameterError("trajectory needs at least one camera")
        res = cams[0].resolution()
        if any(c.resolution() != res for c in cams):
            raise InvalidParameterError("all trajectory cameras must share one resolution")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def at(self, index: int) -> Camera:
        """Camera for 1-based frame index."""
        if not 1 <= index <= len(self.cameras):
            raise InvalidParameterError(f"frame index {index} outside [1, {len(self.cameras)}]")
        return self.cameras[index - 1]

    def subset(self, indices: Sequence[int]) -> "Trajectory":
        return Trajectory(tuple(self.at(i) for i in indices))


@dataclass(frozen=True)
class ImageFrame:
    """H x W x 3 image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidParameterError("pixels must have shape (H, W, 3)")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidParameterError("pixel values must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class VideoClip:
    """Ordered frames plus their global trajectory indices."""

    frames: tuple[ImageFrame, ...]
    frame_indices: tuple[int, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        indices = tuple(int(i) for i in self.frame_indices)
        if len(frames) != len(indices):
            raise InvalidParameterError("frames and frame_indices must align")
        if frames:
            shape = frames[0].pixels.shape
            if any(f.pixels.shape != shape for f in frames):
                raise InvalidParameterError("all frames must share one shape")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise InvalidParameterError("frame_indices must be strictly increasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_indices", indices)

    @classmethod
    def from_array(cls, array: np.ndarray, frame_indices: Sequence[int]) -> "VideoClip":
        frames = tuple(ImageFrame(array[i]) for i in range(array.shape[0]))
        return cls(frames, tuple(frame_indices))

    def __len__(self) -> int:
        return len(self.frames)

    def as_array(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0, 0, 0, 3))
        return np.stack([f.pixels for f in self.frames])


@dataclass(frozen=True)
class LatentVideo:
    """Per-frame latent grids of shape (N, h, w, C) plus the spatial downsample factor."""

    latents: np.ndarray
    downsample: int = 1

    def __post_init__(self):
        lat = np.asarray(self.latents, dtype=np.float64)
        if lat.ndim != 4:
            raise InvalidParameterError("latents must have shape (N, h, w, C)")
        if not np.all(np.isfinite(lat)):
            raise InvalidParameterError("latent values must be finite")
        if self.downsample < 1:
            raise InvalidParameterError("downsample factor must be >= 1")
        object.__setattr__(self, "latents", _freeze(lat))
        object.__setattr__(self, "downsample", int(self.downsample))

    @property
    def num_frames(self) -> int:
        return self.latents.shape[0]

    @property
    def channels(self) -> int:
        return self.latents.shape[3]

    def with_latents(self, latents: np.ndarray) -> "LatentVideo":
        return LatentVideo(latents, self.downsample)


@dataclass
class PipelineConfig:
    """Every knob the windowed generation/refinement loop reads.

    window_length / overlap are the per-window frame count and the number of
    frames shared with the previous window. lambda0 scales the latent
    momentum, tau thresholds the pixel momentum, gamma mixes the SSIM term
    into the refinement loss.
    """

    window_length: int = 25
    overlap: int = 10
    lambda0: float = 0.8
    tau: float = 0.5
    gamma: float = 0.2
    diffusion_steps: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    deterministic_sampling: bool = False
    momentum_noise_convention: str = "as-printed"  # or "forward-consistent"
    optimize_steps: int = 5000
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    s_max: float | None = None  # None: 90th percentile of scales at init
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    denoiser: str = "oracle"
    codec: str = "identity"
    init_stride: int = 1

    def __post_init__(self):
        if not (1 <= self.overlap < self.window_length):
            raise InvalidParameterError("need 1 <= overlap < window_length")
        if not (0.0 <= self.lambda0 <= 1.0):
            raise InvalidParameterError("lambda0 must lie in [0, 1]")
        if not (0.0 <= self.tau < 1.0):
            raise InvalidParameterError("tau must lie in [0, 1)")
        if not (0.0 <= self.gamma <= 1.0):
            raise InvalidParameterError("gamma must lie in [0, 1]")
        if self.diffusion_steps < 1:
            raise InvalidParameterError("diffusion_steps must be >= 1")
        if self.momentum_noise_convention not in ("as-printed", "forward-consistent"):
            raise InvalidParameterError("momentum_noise_convention must be 'as-printed' or 'forward-consistent'")
        if self.s_max is not None and self.s_max <= 0:
            raise InvalidParameterError("s_max must be positive")
        bg = tuple(float(v) for v in self.background)
        if len(bg) != 3:
            raise InvalidParameterError("background must be an RGB triple")
        self.background = bg
