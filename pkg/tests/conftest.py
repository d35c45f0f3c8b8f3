"""Shared scene/camera builders for the test suite."""

import numpy as np
import pytest

from scenesplat.core import Camera, GaussianScene, ImageFrame, Trajectory, VideoClip


def make_random_scene(rng, n, degree=0, depth=3.0, spread=0.8):
    """Random valid scene in front of an identity-pose camera at the origin."""
    k = (degree + 1) ** 2
    positions = rng.uniform(-1, 1, (n, 3)) * [spread, spread, 0.4] + [0, 0, depth]
    scales = rng.uniform(0.02, 0.25, (n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacities = rng.uniform(0.1, 0.95, n)
    colors = rng.uniform(0.05, 0.95, (n, k, 3))
    if degree > 0:
        colors[:, 1:, :] = rng.uniform(-0.2, 0.2, (n, k - 1, 3))
    return GaussianScene(positions, scales, rotations, opacities, colors, degree)


def front_camera(width=64, height=64, fx=None, fy=None, cx=None, cy=None):
    """Identity-pose pinhole camera looking down +z."""
    fx = fx if fx is not None else width * 0.9
    fy = fy if fy is not None else width * 0.95
    return Camera(
        fx=fx, fy=fy,
        cx=width / 2.0 if cx is None else cx,
        cy=height / 2.0 if cy is None else cy,
        width=width, height=height, rotation=np.eye(3), translation=np.zeros(3),
    )


def orbit_camera(angle, pivot_z=3.0, width=32, height=32, fx=30.0):
    """Camera swung rigidly around a pivot on the optical axis."""
    c, s = np.cos(angle), np.sin(angle)
    spin = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    pivot = np.array([0.0, 0.0, pivot_z])
    position = pivot + spin @ (np.zeros(3) - pivot)
    rotation = spin.T
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height,
                  rotation=rotation, translation=-rotation @ position)


def orbit_trajectory(count, sweep=0.5, pivot_z=3.0, width=32, height=32, fx=30.0):
    angles = np.linspace(-sweep / 2, sweep / 2, count)
    return Trajectory(tuple(
        orbit_camera(a, pivot_z, width, height, fx) for a in angles))


def smooth_image(rng, height, width):
    """Low-frequency synthetic image in [0.05, 0.95]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, 3)
    img = np.stack([
        0.5 + 0.4 * np.sin(2 * np.pi * (xx * 1.3 + yy * 0.7) + phase[0]),
        0.5 + 0.4 * np.cos(2 * np.pi * (xx * 0.6 - yy * 1.1) + phase[1]),
        0.5 + 0.4 * np.sin(2 * np.pi * (xx + yy) + phase[2]),
    ], axis=-1)
    return ImageFrame(0.05 + 0.9 * (img - img.min()) / (img.max() - img.min()))


def random_clip(rng, n, height, width):
    return VideoClip.from_array(rng.uniform(0, 1, (n, height, width, 3)),
                                tuple(range(1, n + 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
