"""Brute-force reference renderer: every Gaussian against every pixel.

This is the oracle the fast tiled renderer is tested against. It shares the
renderer's contribution rules (3-sigma cutoff, alpha floor, transmittance
cutoff, global depth sort) but is written as an independent dense
computation: no bounding boxes, no incremental per-splat state; transmittance
comes from one prefix cumulative product over the full pixel-splat matrix.
"""

from __future__ import annotations

import numpy as np

from .core import Camera, GaussianScene, covariance_matrix
from .render import ALPHA_MIN, BLUR_EPS, COND_MAX, FOOTPRINT_SIGMA, NEAR_PLANE, T_MIN, sh_basis


def _project_all(scene: GaussianScene, camera: Camera):
    """Scalar-style projection of every primitive; returns splat rows sorted by depth."""
    rows = []
    for i in range(len(scene)):
        x_cam = camera.rotation @ scene.positions[i] + camera.translation
        z = x_cam[2]
        if z <= NEAR_PLANE:
            continue
        u = camera.fx * x_cam[0] / z + camera.cx
        v = camera.fy * x_cam[1] / z + camera.cy
        jac = np.array([
            [camera.fx / z, 0.0, -camera.fx * x_cam[0] / z**2],
            [0.0, camera.fy / z, -camera.fy * x_cam[1] / z**2],
        ])
        cov3d = covariance_matrix(scene.scales[i], scene.rotations[i])
        cov_cam = camera.rotation @ cov3d @ camera.rotation.T
        cov2d = jac @ cov_cam @ jac.T + BLUR_EPS * np.eye(2)
        eigs = np.linalg.eigvalsh(cov2d)
        if eigs[0] <= 0 or eigs[1] / eigs[0] > COND_MAX:
            continue
        rx = FOOTPRINT_SIGMA * np.sqrt(cov2d[0, 0])
        ry = FOOTPRINT_SIGMA * np.sqrt(cov2d[1, 1])
        if (np.ceil(u + rx) + 1 < 0 or np.floor(u - rx) - 1 > camera.width - 1
                or np.ceil(v + ry) + 1 < 0 or np.floor(v - ry) - 1 > camera.height - 1):
            continue
        center = camera.camera_center
        delta = scene.positions[i] - center
        dist = np.linalg.norm(delta)
        direction = delta / dist if dist > 0 else delta
        color = sh_basis(direction, scene.sh_degree) @ scene.colors[i]
        rows.append((z, np.array([u, v]), np.linalg.inv(cov2d), scene.opacities[i],
                     color, scene.scales[i]))
    rows.sort(key=lambda r: r[0])
    return rows


def _composite_dense(rows, camera: Camera, values: np.ndarray, background):
    """Dense (pixels x splats) compositing with a single prefix product."""
    h, w = camera.height, camera.width
    if not rows:
        img = np.zeros((h, w, 3))
        if background is not None:
            img += np.asarray(background, dtype=np.float64)
        return img, np.ones((h, w)), np.zeros((h, w))

    px = np.arange(w) + 0.5
    py = np.arange(h) + 0.5
    gx, gy = np.meshgrid(px, py)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (P, 2)

    n = len(rows)
    alphas = np.zeros((pix.shape[0], n))
    for j, (_, mean, inv_cov, opacity, _, _) in enumerate(rows):
        d = pix - mean
        maha = (inv_cov[0, 0] * d[:, 0]**2 + 2 * inv_cov[0, 1] * d[:, 0] * d[:, 1]
                + inv_cov[1, 1] * d[:, 1]**2)
        a = opacity * np.exp(-0.5 * maha)
        a[(maha > FOOTPRINT_SIGMA**2) | (a < ALPHA_MIN)] = 0.0
        alphas[:, j] = a

    prefix = np.concatenate(
        [np.ones((pix.shape[0], 1)), np.cumprod(1.0 - alphas, axis=1)], axis=1
    )
    keep = prefix[:, :-1] > T_MIN
    weights = alphas * prefix[:, :-1] * keep
    kept_count = keep.sum(axis=1)
    t_final = prefix[np.arange(pix.shape[0]), kept_count]

    img = weights @ values
    if background is not None:
        img = img + t_final[:, None] * np.asarray(background, dtype=np.float64)
    return (img.reshape(h, w, 3), t_final.reshape(h, w),
            weights.sum(axis=1).reshape(h, w))


def reference_render_color(
    scene: GaussianScene, camera: Camera, background=(0.0, 0.0, 0.0), clamp: bool = True,
) -> np.ndarray:
    rows = _project_all(scene, camera)
    values = np.array([r[4] for r in rows]) if rows else np.zeros((0, 3))
    img, _, _ = _composite_dense(rows, camera, values, background)
    return np.clip(img, 0.0, 1.0) if clamp else img


def reference_render_scale_map(scene: GaussianScene, camera: Camera, s_max: float) -> np.ndarray:
    rows = _project_all(scene, camera)
    if rows:
        raw = np.array([r[5] for r in rows])
        norm = np.minimum(raw / s_max, 1.0 - 1e-6)
        values = 1.0 - np.sort(norm, axis=1)[:, ::-1]
    else:
        values = np.zeros((0, 3))
    img, _, _ = _composite_dense(rows, camera, values, background=None)
    return img


def reference_transmittance(scene: GaussianScene, camera: Camera):
    """(sum of composited alpha weights, final transmittance) per pixel."""
    rows = _project_all(scene, camera)
    values = np.array([r[4] for r in rows]) if rows else np.zeros((0, 3))
    _, t_final, weight_sum = _composite_dense(rows, camera, values, background=None)
    return weight_sum, t_final
