"""Forward splat rendering (color and scale maps) with an analytic backward pass.

The pipeline per view: project each 3D Gaussian to a 2D splat (pinhole mean,
first-order covariance transfer), sort front-to-back by camera-space depth,
then alpha-composite per pixel. A splat contributes to a pixel only when the
pixel center lies inside its 3-sigma ellipse, its effective alpha reaches
ALPHA_MIN, and the pixel's remaining transmittance is above T_MIN; the
brute-force reference renderer applies the identical rule set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianScene, ImageFrame, InvalidParameterError, Trajectory, VideoClip

NEAR_PLANE = 1e-2
BLUR_EPS = 0.3          # px^2 added to cov2d's diagonal
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4            # stop compositing once transmittance falls below this
FOOTPRINT_SIGMA = 3.0
COND_MAX = 1e12
SCALE_NORM_CAP = 1.0 - 1e-6

_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)


@dataclass
class RenderStats:
    """Counters filled during projection; reported on the diagnostics stream."""

    culled: int = 0
    skipped_degenerate: int = 0

    def add(self, other: "RenderStats") -> None:
        self.culled += other.culled
        self.skipped_degenerate += other.skipped_degenerate


@dataclass(frozen=True)
class Splat2D:
    """A projected Gaussian ready for compositing."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    base_opacity: float
    evaluated_color: np.ndarray
    scale_feature: np.ndarray


@dataclass(frozen=True)
class ScaleMap:
    """H x W x 3 composited (1 - normalized scale) map; entries in [0, 1)."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or vals.shape[2] != 3:
            raise InvalidParameterError("scale map must have shape (H, W, 3)")
        if vals.min() < 0.0 or vals.max() >= 1.0:
            raise InvalidParameterError("scale map entries must lie in [0, 1)")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass
class SceneGradients:
    """Per-primitive partials of a scalar loss; shapes mirror the scene arrays."""

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


def sh_basis(direction: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (..., (degree+1)^2).

    The degree-0 entry is 1, so a degree-0 coefficient row is a plain RGB
    color; higher bands use the standard real-harmonic constants.
    """
    shape = direction.shape[:-1]
    x, y, z = direction[..., 0], direction[..., 1], direction[..., 2]
    cols = [np.ones(shape)]
    if degree >= 1:
        cols += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree >= 2:
        cols += [
            _SH_C2[0] * x * y,
            _SH_C2[1] * y * z,
            _SH_C2[2] * (2.0 * z * z - x * x - y * y),
            _SH_C2[3] * x * z,
            _SH_C2[4] * (x * x - y * y),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_gradient(direction: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction), shape (..., (degree+1)^2, 3)."""
    shape = direction.shape[:-1]
    x, y, z = direction[..., 0], direction[..., 1], direction[..., 2]
    zero = np.zeros(shape)
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if degree >= 1:
        one = np.ones(shape)
        rows += [
            np.stack([zero, -_SH_C1 * one, zero], axis=-1),
            np.stack([zero, zero, _SH_C1 * one], axis=-1),
            np.stack([-_SH_C1 * one, zero, zero], axis=-1),
        ]
    if degree >= 2:
        c0, c1, c2, c3, c4 = _SH_C2
        rows += [
            np.stack([c0 * y, c0 * x, zero], axis=-1),
            np.stack([zero, c1 * z, c1 * y], axis=-1),
            np.stack([-2 * c2 * x, -2 * c2 * y, 4 * c2 * z], axis=-1),
            np.stack([c3 * z, zero, c3 * x], axis=-1),
            np.stack([2 * c4 * x, -2 * c4 * y, zero], axis=-1),
        ]
    return np.stack(rows, axis=-2)


def normalized_scale_features(scales: np.ndarray, s_max: float) -> np.ndarray:
    """Per-splat (1 - S) vectors with S = clamp(scale/s_max) sorted descending.

    Channel 0 always reflects each Gaussian's largest axis.
    """
    if s_max <= 0:
        raise InvalidParameterError("s_max must be positive")
    norm = np.minimum(scales / s_max, SCALE_NORM_CAP)
    norm = -np.sort(-norm, axis=1)
    return 1.0 - norm


def _quaternion_rotations(quats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched rotation matrices plus the unit quats and their source norms."""
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise InvalidParameterError("rotation quaternions must be finite and non-zero")
    u = quats / norms[:, None]
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    rot = np.empty((quats.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot, u, norms


@dataclass
class ProjectedScene:
    """Depth-sorted splat arrays plus the context the backward pass replays."""

    camera: Camera
    order: np.ndarray          # indices into the scene, front to back
    mean2d: np.ndarray         # (S, 2)
    cov2d: np.ndarray          # (S, 2, 2), blur_eps included
    inv_cov2d: np.ndarray      # (S, 2, 2)
    depth: np.ndarray          # (S,)
    opacity: np.ndarray        # (S,)
    color: np.ndarray          # (S, 3) SH-evaluated for this view
    scale_feature: np.ndarray  # (S, 3)
    boxes: np.ndarray          # (S, 4) int: x0, x1, y0, y1 inclusive
    x_cam: np.ndarray          # (S, 3)
    jacobian: np.ndarray       # (S, 2, 3)
    cov_cam: np.ndarray        # (S, 3, 3)
    rot_mats: np.ndarray       # (S, 3, 3)
    unit_quats: np.ndarray     # (S, 4)
    quat_norms: np.ndarray     # (S,)
    view_dir: np.ndarray       # (S, 3)
    view_dist: np.ndarray      # (S,)
    basis: np.ndarray          # (S, K)
    num_source: int = 0
    stats: RenderStats = field(default_factory=RenderStats)


def project_scene(
    scene: GaussianScene,
    camera: Camera,
    s_max: float = 1.0,
    stats: RenderStats | None = None,
) -> ProjectedScene:
    """Project every primitive, drop culled/degenerate ones, sort by depth."""
    n = len(scene)
    out_stats = stats if stats is not None else RenderStats()
    if n == 0:
        empty = ProjectedScene(
            camera, np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros((0, 2, 2)),
            np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 3)),
            np.zeros((0, 3)), np.zeros((0, 4), dtype=int), np.zeros((0, 3)),
            np.zeros((0, 2, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3, 3)),
            np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, 1)), 0, out_stats,
        )
        return empty

    rot_cam = camera.rotation
    x_cam = scene.positions @ rot_cam.T + camera.translation
    z = x_cam[:, 2]

    in_front = z > NEAR_PLANE
    # Guard the division for culled splats; they are dropped below.
    z_safe = np.where(in_front, z, 1.0)
    u = camera.fx * x_cam[:, 0] / z_safe + camera.cx
    v = camera.fy * x_cam[:, 1] / z_safe + camera.cy
    mean2d = np.stack([u, v], axis=1)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / z_safe
    jac[:, 0, 2] = -camera.fx * x_cam[:, 0] / z_safe**2
    jac[:, 1, 1] = camera.fy / z_safe
    jac[:, 1, 2] = -camera.fy * x_cam[:, 1] / z_safe**2

    rot_mats, unit_quats, quat_norms = _quaternion_rotations(scene.rotations)
    m = rot_mats * scene.scales[:, None, :]                 # R diag(s)
    cov_world = m @ m.transpose(0, 2, 1)
    cov_cam = np.einsum("ij,njk,lk->nil", rot_cam, cov_world, rot_cam)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    cov2d[:, 0, 0] += BLUR_EPS
    cov2d[:, 1, 1] += BLUR_EPS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    half_gap = np.sqrt(((a - c) * 0.5) ** 2 + b * b)
    eig_max = (a + c) * 0.5 + half_gap
    eig_min = (a + c) * 0.5 - half_gap
    degenerate = in_front & ((eig_min <= 0) | (eig_max / np.maximum(eig_min, 1e-300) > COND_MAX))

    rx = FOOTPRINT_SIGMA * np.sqrt(np.maximum(a, 0.0))
    ry = FOOTPRINT_SIGMA * np.sqrt(np.maximum(c, 0.0))
    x0 = np.floor(u - rx).astype(int) - 1
    x1 = np.ceil(u + rx).astype(int) + 1
    y0 = np.floor(v - ry).astype(int) - 1
    y1 = np.ceil(v + ry).astype(int) + 1
    on_image = (x1 >= 0) & (x0 <= camera.width - 1) & (y1 >= 0) & (y0 <= camera.height - 1)

    keep = in_front & on_image & ~degenerate
    out_stats.culled += int(np.count_nonzero(~(in_front & on_image)))
    out_stats.skipped_degenerate += int(np.count_nonzero(degenerate & in_front & on_image))

    idx = np.flatnonzero(keep)
    idx = idx[np.argsort(z[idx], kind="stable")]

    det = a[idx] * c[idx] - b[idx] ** 2
    inv = np.empty((idx.size, 2, 2))
    inv[:, 0, 0] = c[idx] / det
    inv[:, 0, 1] = -b[idx] / det
    inv[:, 1, 0] = -b[idx] / det
    inv[:, 1, 1] = a[idx] / det

    center = camera.camera_center
    delta = scene.positions[idx] - center
    dist = np.linalg.norm(delta, axis=1)
    dist_safe = np.where(dist > 0, dist, 1.0)
    view_dir = delta / dist_safe[:, None]
    basis = sh_basis(view_dir, scene.sh_degree)
    color = np.einsum("sk,skc->sc", basis, scene.colors[idx])

    boxes = np.stack([
        np.clip(x0[idx], 0, camera.width - 1),
        np.clip(x1[idx], 0, camera.width - 1),
        np.clip(y0[idx], 0, camera.height - 1),
        np.clip(y1[idx], 0, camera.height - 1),
    ], axis=1)

    return ProjectedScene(
        camera=camera, order=idx, mean2d=mean2d[idx], cov2d=cov2d[idx],
        inv_cov2d=inv, depth=z[idx], opacity=scene.opacities[idx], color=color,
        scale_feature=normalized_scale_features(scene.scales[idx], s_max),
        boxes=boxes, x_cam=x_cam[idx], jacobian=jac[idx], cov_cam=cov_cam[idx],
        rot_mats=rot_mats[idx], unit_quats=unit_quats[idx], quat_norms=quat_norms[idx],
        view_dir=view_dir, view_dist=dist_safe, basis=basis,
        num_source=n, stats=out_stats,
    )


def project(primitive, camera: Camera, s_max: float = 1.0) -> Splat2D | None:
    """Project a single primitive; returns None when it is culled."""
    scene = GaussianScene(
        primitive.position[None], primitive.scale[None], primitive.rotation[None],
        np.array([primitive.opacity]), primitive.color[None], primitive.sh_degree,
    )
    proj = project_scene(scene, camera, s_max=s_max)
    if proj.order.size == 0:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0], cov2d=proj.cov2d[0], view_depth=float(proj.depth[0]),
        base_opacity=float(proj.opacity[0]), evaluated_color=proj.color[0],
        scale_feature=proj.scale_feature[0],
    )


def _pixel_offsets(box: np.ndarray, mean: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple]:
    x0, x1, y0, y1 = box
    sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
    dx = (np.arange(x0, x1 + 1) + 0.5) - mean[0]
    dy = (np.arange(y0, y1 + 1) + 0.5) - mean[1]
    return dx[None, :], dy[:, None], sl


def composite(
    projected: ProjectedScene,
    values: np.ndarray,
    background: np.ndarray | None = None,
    record: bool = False,
):
    """Front-to-back compositing of per-splat 3-vector values.

    Returns (image, final transmittance, per-splat records for the backward
    pass). ``values`` has shape (S, 3); ``background`` is only added in color
    mode.
    """
    h, w = projected.camera.height, projected.camera.width
    img = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    records: list[tuple] = []
    cutoff = FOOTPRINT_SIGMA**2
    for s in range(projected.order.size):
        dx, dy, sl = _pixel_offsets(projected.boxes[s], projected.mean2d[s])
        lam = projected.inv_cov2d[s]
        maha = lam[0, 0] * dx * dx + 2.0 * lam[0, 1] * dx * dy + lam[1, 1] * dy * dy
        gauss = np.exp(-0.5 * maha)
        alpha = projected.opacity[s] * gauss
        include = (maha <= cutoff) & (alpha >= ALPHA_MIN) & (trans[sl] > T_MIN)
        alpha = np.where(include, alpha, 0.0)
        weight = alpha * trans[sl]
        img[sl] += weight[..., None] * values[s]
        trans[sl] = trans[sl] * (1.0 - alpha)
        if record:
            records.append((sl, include, alpha, gauss, dx, dy))
    if background is not None:
        img += trans[..., None] * np.asarray(background, dtype=np.float64)
    return img, trans, records


def render_color(
    scene: GaussianScene,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    stats: RenderStats | None = None,
    clamp: bool = True,
) -> ImageFrame | np.ndarray:
    """Composite scene colors over a background; clamped to [0, 1] by default.

    With clamp=False the raw composite array is returned (used by gradient
    checks, which differentiate the unclamped image).
    """
    proj = project_scene(scene, camera, stats=stats)
    img, _, _ = composite(proj, proj.color, np.asarray(background, dtype=np.float64))
    if not clamp:
        return img
    return ImageFrame(np.clip(img, 0.0, 1.0))


def render_scale_map(
    scene: GaussianScene,
    camera: Camera,
    s_max: float,
    stats: RenderStats | None = None,
) -> ScaleMap:
    """Composite (1 - normalized scale) per axis; no background term."""
    proj = project_scene(scene, camera, s_max=s_max, stats=stats)
    img, _, _ = composite(proj, proj.scale_feature, background=None)
    return ScaleMap(img)


def render_video(
    scene: GaussianScene,
    trajectory: Trajectory,
    background=(0.0, 0.0, 0.0),
    frame_indices=None,
    stats: RenderStats | None = None,
) -> VideoClip:
    """Render one frame per trajectory camera, in order."""
    if frame_indices is None:
        frame_indices = tuple(range(1, len(trajectory) + 1))
    frames = tuple(
        render_color(scene, cam, background, stats=stats) for cam in trajectory.cameras
    )
    return VideoClip(frames, tuple(frame_indices))


def _quat_partials(unit: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion): shape (S, 4, 3, 3)."""
    w, x, y, z = unit[:, 0], unit[:, 1], unit[:, 2], unit[:, 3]
    s = unit.shape[0]
    zero = np.zeros(s)
    d = np.empty((s, 4, 3, 3))
    d[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], -2)
    d[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1),
    ], -2)
    d[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1),
    ], -2)
    d[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1),
    ], -2)
    return d


def render_gradients(
    scene: GaussianScene,
    camera: Camera,
    grad_image: np.ndarray,
    background=(0.0, 0.0, 0.0),
) -> SceneGradients:
    """Partials of L = sum(grad_image * raw_composite) w.r.t. all scene arrays.

    Differentiates through compositing, SH evaluation, projection and
    covariance construction; the [0,1] display clamp is not part of L.
    """
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (camera.height, camera.width, 3):
        raise InvalidParameterError("grad_image shape must match the camera resolution")

    n = len(scene)
    k = scene.colors.shape[1]
    grads = SceneGradients(
        positions=np.zeros((n, 3)), scales=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)), opacities=np.zeros(n), colors=np.zeros((n, k, 3)),
    )
    proj = project_scene(scene, camera)
    ns = proj.order.size
    if ns == 0:
        return grads

    bg = np.asarray(background, dtype=np.float64)
    _, trans_final, records = composite(proj, proj.color, bg, record=True)

    # Suffix pass, back to front: recover each splat's entry transmittance and
    # the color accumulated behind it (including the background term).
    suffix = trans_final[..., None] * bg
    trans = trans_final.copy()
    g_mean2d = np.zeros((ns, 2))
    g_cov2d = np.zeros((ns, 2, 2))
    g_alpha_base = np.zeros(ns)
    g_value = np.zeros((ns, 3))
    for s in range(ns - 1, -1, -1):
        sl, include, alpha, gauss, dx, dy = records[s]
        if not include.any():
            continue
        one_minus = 1.0 - alpha
        t_before = np.where(include, trans[sl] / one_minus, trans[sl])
        g_pix = grad_image[sl]
        value = proj.color[s]
        d_alpha = (g_pix * (value[None, None, :] * t_before[..., None]
                            - suffix[sl] / one_minus[..., None])).sum(-1)
        d_alpha = np.where(include, d_alpha, 0.0)
        weight = alpha * t_before
        g_value[s] = (g_pix * weight[..., None]).sum((0, 1))
        g_alpha_base[s] = float((d_alpha * gauss).sum())
        d_maha = -0.5 * gauss * (d_alpha * proj.opacity[s])
        lam = proj.inv_cov2d[s]
        ldx = lam[0, 0] * dx + lam[0, 1] * dy
        ldy = lam[1, 0] * dx + lam[1, 1] * dy
        g_mean2d[s, 0] = -2.0 * float((d_maha * ldx).sum())
        g_mean2d[s, 1] = -2.0 * float((d_maha * ldy).sum())
        sxx = float((d_maha * dx * dx).sum())
        sxy = float((d_maha * dx * dy).sum())
        syy = float((d_maha * dy * dy).sum())
        g_lam = np.array([[sxx, sxy], [sxy, syy]])
        g_cov2d[s] = -lam @ g_lam @ lam
        suffix[sl] = suffix[sl] + weight[..., None] * value
        trans[sl] = t_before

    # Chain to camera-space position and 3D covariance.
    jac = proj.jacobian
    g_xcam = np.einsum("sij,si->sj", jac, g_mean2d)
    g_cov_cam = np.einsum("sij,sik,skl->sjl", jac, g_cov2d, jac)
    g_jac = 2.0 * np.einsum("sij,sjk,skl->sil", g_cov2d, jac, proj.cov_cam)
    fx, fy = camera.fx, camera.fy
    x, y, z = proj.x_cam[:, 0], proj.x_cam[:, 1], proj.x_cam[:, 2]
    tx, ty = fx / z**2, fy / z**2
    g_xcam[:, 0] += g_jac[:, 0, 2] * (-tx)
    g_xcam[:, 1] += g_jac[:, 1, 2] * (-ty)
    g_xcam[:, 2] += (g_jac[:, 0, 0] * (-tx) + g_jac[:, 1, 1] * (-ty)
                     + g_jac[:, 0, 2] * (2 * fx * x / z**3)
                     + g_jac[:, 1, 2] * (2 * fy * y / z**3))

    rot_cam = camera.rotation
    g_position = g_xcam @ rot_cam
    g_cov_world = np.einsum("ji,sjk,kl->sil", rot_cam, g_cov_cam, rot_cam)

    # Covariance = M M^T with M = R diag(s).
    scales = scene.scales[proj.order]
    m = proj.rot_mats * scales[:, None, :]
    g_m = 2.0 * np.einsum("sij,sjk->sik", g_cov_world, m)
    g_scale = np.einsum("sik,sik->sk", g_m, proj.rot_mats)
    g_rotmat = g_m * scales[:, None, :]
    partials = _quat_partials(proj.unit_quats)
    g_unit = np.einsum("sij,scij->sc", g_rotmat, partials)
    # Through quaternion normalization: u = q / |q|.
    dot = np.einsum("sc,sc->s", proj.unit_quats, g_unit)
    g_quat = (g_unit - proj.unit_quats * dot[:, None]) / proj.quat_norms[:, None]

    # Color coefficients and, for degree >= 1, view-direction dependence.
    g_colors = proj.basis[:, :, None] * g_value[:, None, :]
    if scene.sh_degree >= 1:
        basis_grad = sh_basis_gradient(proj.view_dir, scene.sh_degree)
        g_basis = np.einsum("skc,sc->sk", scene.colors[proj.order], g_value)
        g_dir = np.einsum("sk,skd->sd", g_basis, basis_grad)
        ddot = np.einsum("sd,sd->s", proj.view_dir, g_dir)
        g_position += (g_dir - proj.view_dir * ddot[:, None]) / proj.view_dist[:, None]

    grads.positions[proj.order] = g_position
    grads.scales[proj.order] = g_scale
    grads.rotations[proj.order] = g_quat
    grads.opacities[proj.order] = g_alpha_base
    grads.colors[proj.order] = g_colors
    return grads
