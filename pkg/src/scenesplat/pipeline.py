"""End-to-end reconstruction: RGBD seeding, camera paths, the windowed
enhance/refine loop with overlap bookkeeping, checkpointing, and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .cascade import enhance_window_detailed
from .core import (
    Camera,
    GaussianScene,
    ImageFrame,
    InvalidParameterError,
    PipelineConfig,
    SceneSplatError,
    Trajectory,
    VideoClip,
)
from .diffusion import (
    AffineDenoiser,
    ConditionOracleDenoiser,
    GaussianScoreDenoiser,
    OracleDenoiser,
    ZeroDenoiser,
    build_schedule,
    get_codec,
)
from .metrics import psnr, ssim
from .optimize import LOSS_CSV_HEADER, LossEntry, OptimizeConfig, loss_history_rows, optimize_scene
from .render import RenderStats, render_color
from .rng import NoiseSource

logger = logging.getLogger(__name__)

PROVENANCE_INPUT = "input"


class PipelineError(SceneSplatError):
    pass


def provenance_for_window(s: int) -> str:
    return f"generated-window-{s}"


@dataclass(frozen=True)
class RGBDInput:
    """The seed view: image, per-pixel positive metric depth, and its camera."""

    image: ImageFrame
    depth: np.ndarray
    camera: Camera

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.shape != (self.image.height, self.image.width):
            raise InvalidParameterError("depth must match the image resolution")
        bad = ~np.isfinite(depth) | (depth <= 0)
        if bad.any():
            rows, cols = np.nonzero(bad)
            sample = ", ".join(f"({r},{c})" for r, c in list(zip(rows, cols))[:8])
            raise InvalidParameterError(
                f"depth must be finite and positive; offending pixels: {sample}"
                + (" ..." if rows.size > 8 else "")
            )
        if (self.camera.width, self.camera.height) != (self.image.width, self.image.height):
            raise InvalidParameterError("camera resolution must match the image")
        depth = depth.copy()
        depth.setflags(write=False)
        object.__setattr__(self, "depth", depth)


@dataclass(frozen=True)
class StoredFrame:
    image: ImageFrame
    camera: Camera
    provenance: str


class FrameStore:
    """The evolving supervision set, keyed by global frame index.

    Index 0 always holds the input view and can be neither removed nor
    overwritten.
    """

    def __init__(self, input_image: ImageFrame, input_camera: Camera):
        self._frames: dict[int, StoredFrame] = {
            0: StoredFrame(input_image, input_camera, PROVENANCE_INPUT)
        }

    def __len__(self) -> int:
        return len(self._frames)

    def __contains__(self, index: int) -> bool:
        return index in self._frames

    def indices(self) -> list[int]:
        return sorted(self._frames)

    def get(self, index: int) -> StoredFrame:
        return self._frames[index]

    def insert(self, index: int, image: ImageFrame, camera: Camera, provenance: str) -> None:
        if index == 0:
            raise InvalidParameterError("frame index 0 is reserved for the input view")
        if index < 0:
            raise InvalidParameterError("frame indices must be non-negative")
        self._frames[index] = StoredFrame(image, camera, provenance)

    def remove(self, index: int) -> None:
        if index == 0:
            raise InvalidParameterError("the input frame cannot be removed")
        if index not in self._frames:
            raise InvalidParameterError(f"frame {index} not present")
        del self._frames[index]

    def supervision(self) -> tuple[VideoClip, Trajectory]:
        order = self.indices()
        clip = VideoClip(tuple(self._frames[i].image for i in order), tuple(order))
        return clip, Trajectory(tuple(self._frames[i].camera for i in order))

    # Checkpointing: frames go to lossless float64 tensors so a resumed run
    # continues from bit-identical state.

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for index, stored in self._frames.items():
            name = f"frame_{index:05d}.sstf"
            io.save_tensor(stored.image.pixels, directory / name, dtype="f8")
            manifest[str(index)] = {
                "tensor": name,
                "provenance": stored.provenance,
                "camera": io.camera_to_dict(stored.camera),
            }
        (directory / "store.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory: Path) -> "FrameStore":
        manifest = json.loads((directory / "store.json").read_text())
        entries = {}
        for key, rec in manifest.items():
            entries[int(key)] = StoredFrame(
                ImageFrame(io.load_tensor(directory / rec["tensor"])),
                io.camera_from_dict(rec["camera"]),
                rec["provenance"],
            )
        if 0 not in entries:
            raise io.FormatError("store manifest is missing the input frame")
        store = cls.__new__(cls)
        store._frames = entries
        return store


def init_scene_from_rgbd(rgbd: RGBDInput, config: PipelineConfig) -> GaussianScene:
    """Unproject one Gaussian per (strided) pixel.

    Each Gaussian sits on the camera ray at the stored depth, takes the pixel
    RGB as its degree-0 color, opacity 0.8, an isotropic scale of
    stride * depth / fx (the world-space pixel footprint), and identity
    rotation.
    """
    stride = max(int(config.init_stride), 1)
    cam = rgbd.camera
    rows = np.arange(0, rgbd.image.height, stride)
    cols = np.arange(0, rgbd.image.width, stride)
    cc, rr = np.meshgrid(cols, rows)
    rr = rr.ravel()
    cc = cc.ravel()
    depth = rgbd.depth[rr, cc]
    if np.any(depth <= 0):
        bad = np.flatnonzero(depth <= 0)
        raise InvalidParameterError(f"non-positive depth at pixels {bad[:8]}")
    u = cc + 0.5
    v = rr + 0.5
    p_cam = np.stack([
        (u - cam.cx) / cam.fx * depth,
        (v - cam.cy) / cam.fy * depth,
        depth,
    ], axis=1)
    positions = (p_cam - cam.translation) @ cam.rotation
    n = positions.shape[0]
    scale = (depth * stride / cam.fx)[:, None].repeat(3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    colors = rgbd.image.pixels[rr, cc][:, None, :]
    return GaussianScene(
        positions, scale, rotations, np.full(n, 0.8), colors, sh_degree=0,
        metadata={"source": "rgbd-init", "stride": stride},
    )


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_trajectory(
    kind: str,
    count: int | None = None,
    base_camera: Camera | None = None,
    radius: float = 1.0,
    step: float = 0.1,
    sweep_deg: float = 60.0,
    path: str | Path | None = None,
) -> Trajectory:
    """Parametric camera paths with constant intrinsics.

    orbit: rigidly swing the camera around a pivot ``radius`` in front of it,
    sweeping ``sweep_deg`` around the world-up axis. lateral/dolly translate
    along the camera's right/forward axis by ``step`` per frame; zoom-out is a
    backward dolly. file loads the JSON camera document at ``path``.
    """
    if kind == "file":
        if path is None:
            raise InvalidParameterError("file trajectories need a path")
        return io.load_trajectory_json(path)
    if base_camera is None:
        raise InvalidParameterError(f"{kind} trajectories need a base camera")
    if count is None or count < 1:
        raise InvalidParameterError("count must be >= 1")

    base_rot = base_camera.rotation
    base_pos = base_camera.camera_center
    cameras = []
    if kind == "orbit":
        forward = base_rot.T @ np.array([0.0, 0.0, 1.0])
        pivot = base_pos + radius * forward
        angles = np.linspace(0.0, math.radians(sweep_deg), count)
        for angle in angles:
            spin = _rot_y(angle)
            position = pivot + spin @ (base_pos - pivot)
            rotation = base_rot @ spin.T
            cameras.append(dataclasses.replace(
                base_camera, rotation=rotation, translation=-rotation @ position))
    elif kind in ("lateral", "dolly", "zoom-out"):
        axis = {"lateral": np.array([1.0, 0.0, 0.0]),
                "dolly": np.array([0.0, 0.0, 1.0]),
                "zoom-out": np.array([0.0, 0.0, -1.0])}[kind]
        direction = base_rot.T @ axis
        for i in range(count):
            position = base_pos + i * step * direction
            cameras.append(dataclasses.replace(
                base_camera, translation=-base_rot @ position))
    else:
        raise InvalidParameterError(f"unknown trajectory kind {kind!r}")
    return Trajectory(tuple(cameras))


def window_indices(s: int, window_length: int, overlap: int) -> list[int]:
    """Global frame indices of window s: [s(N-n)+1, s(N-n)+N], inclusive.

    The first ``overlap`` indices of window s >= 1 coincide with the last
    ``overlap`` of window s-1.
    """
    if s < 0:
        raise InvalidParameterError("window index must be >= 0")
    if not 1 <= overlap < window_length:
        raise InvalidParameterError("need 1 <= overlap < window_length")
    start = s * (window_length - overlap) + 1
    return list(range(start, start + window_length))


def num_windows(trajectory_length: int, window_length: int, overlap: int) -> int:
    """Count of full windows minus one (the loop runs s = 0..h inclusive)."""
    if trajectory_length < window_length:
        raise PipelineError(
            f"trajectory has {trajectory_length} frames; needs >= {window_length}")
    return (trajectory_length - window_length) // (window_length - overlap)


class OracleWindowFactory:
    """Builds a fixed-target oracle from each window's rendered latents.

    ``transform`` optionally maps the rendered latents before they become the
    target (used to fabricate deliberately inconsistent supervision).
    """

    def __init__(self, schedule, transform=None):
        self.schedule = schedule
        self.transform = transform

    def build(self, latents):
        target = latents.latents
        if self.transform is not None:
            target = self.transform(target)
        return OracleDenoiser(target, self.schedule)


def make_denoiser(key: str, config: PipelineConfig):
    """Resolve a config denoiser key to a callable or per-window factory."""
    schedule = build_schedule(config.diffusion_steps, config.beta_min, config.beta_max,
                              config.deterministic_sampling)
    if key == "oracle":
        return OracleWindowFactory(schedule)
    if key == "condition-oracle":
        return ConditionOracleDenoiser(schedule)
    if key == "zero":
        return ZeroDenoiser()
    if key == "gaussian":
        return GaussianScoreDenoiser(mean=0.0, std=1.0, schedule=schedule)
    if key.startswith("trained:"):
        return AffineDenoiser.load(key.split(":", 1)[1])
    if key.startswith("external:"):
        from .bridge import ExternalDenoiser

        return ExternalDenoiser(key.split(":", 1)[1])
    raise InvalidParameterError(f"unknown denoiser key {key!r}")


@dataclass
class PipelineResult:
    scene: GaussianScene
    store: FrameStore
    histories: list[list[LossEntry]]
    config: PipelineConfig
    stats: RenderStats


def _write_checkpoint(workdir: Path, s: int, scene: GaussianScene, store: FrameStore,
                      histories: list[list[LossEntry]]) -> None:
    ckpt = workdir / "checkpoint"
    ckpt.mkdir(parents=True, exist_ok=True)
    io.save_scene_ply(scene, ckpt / "scene.ply")
    # The PLY is float32 for interop; resume needs the full-precision arrays
    # so a restarted run stays bit-identical to an uninterrupted one.
    np.savez(ckpt / "scene_state.npz", positions=scene.positions, scales=scene.scales,
             rotations=scene.rotations, opacities=scene.opacities, colors=scene.colors,
             sh_degree=scene.sh_degree)
    store.save(ckpt / "frames")
    for i, hist in enumerate(histories):
        io.write_csv(ckpt / f"loss_iter{i}.csv", LOSS_CSV_HEADER, loss_history_rows(hist))
    (ckpt / "state.json").write_text(json.dumps({"completed_iteration": s}))


def _load_checkpoint(workdir: Path):
    ckpt = workdir / "checkpoint"
    state = json.loads((ckpt / "state.json").read_text())
    data = np.load(ckpt / "scene_state.npz")
    scene = GaussianScene(data["positions"], data["scales"], data["rotations"],
                          data["opacities"], data["colors"], int(data["sh_degree"]))
    store = FrameStore.load(ckpt / "frames")
    return state["completed_iteration"], scene, store


def run_pipeline(
    rgbd: RGBDInput,
    trajectory: Trajectory,
    config: PipelineConfig,
    denoiser=None,
    codec=None,
    workdir: str | Path | None = None,
    resume: bool = False,
    opt_config: OptimizeConfig | None = None,
) -> PipelineResult:
    """The full loop: init, then per window enhance -> store update -> refine.

    Window s covers frames [s(N-n)+1, s(N-n)+N]. Window 0 inserts the input
    frame plus all generated frames; later windows first drop their n
    overlapped predecessors, then insert all N regenerated frames (the newer
    window wins). Any trailing trajectory frames that do not fill a window are
    skipped with a warning. On error a resumable checkpoint is left behind.
    """
    n_frames = len(trajectory)
    h = num_windows(n_frames, config.window_length, config.overlap)
    tail = n_frames - (h * (config.window_length - config.overlap) + config.window_length)
    if tail > 0:
        logger.warning("ignoring %d trailing frames beyond the last full window", tail)

    codec = codec if codec is not None else get_codec(config.codec)
    denoiser = denoiser if denoiser is not None else make_denoiser(config.denoiser, config)
    scene = init_scene_from_rgbd(rgbd, config)
    if config.s_max is None:
        s_max = float(np.quantile(scene.scales, 0.9))
        config = dataclasses.replace(config, s_max=max(s_max, 1e-12))
    stats = RenderStats()
    master = NoiseSource(config.seed)
    store = FrameStore(rgbd.image, rgbd.camera)
    histories: list[list[LossEntry]] = []
    start = 0
    work = Path(workdir) if workdir is not None else None
    if resume:
        if work is None:
            raise InvalidParameterError("resume requires a workdir")
        done, scene, store = _load_checkpoint(work)
        start = done + 1
        logger.info("resuming after iteration %d", done)

    if opt_config is None:
        opt_config = OptimizeConfig(
            steps=config.optimize_steps, gamma=config.gamma,
            densify_interval=config.densify_interval,
            opacity_reset_interval=config.opacity_reset_interval,
            background=config.background,
            max_primitives=4 * max(len(scene), 1),
        )

    for s in range(start, h + 1):
        indices = window_indices(s, config.window_length, config.overlap)
        cams = trajectory.subset(indices)
        n_well = 0 if s == 0 else config.overlap
        try:
            result = enhance_window_detailed(
                scene, cams, rgbd.image, n_well, config, denoiser, codec,
                master.child(s), frame_indices=indices, stats=stats,
            )
            if s > 0:
                for i in indices[:config.overlap]:
                    store.remove(i)
            tag = provenance_for_window(s)
            for frame, index in zip(result.blended.frames, indices):
                store.insert(index, frame, trajectory.at(index), tag)
            clip, sup_cams = store.supervision()
            scene, hist = optimize_scene(scene, clip, sup_cams, opt_config)
            histories.append(hist)
        except SceneSplatError:
            if work is not None:
                _write_checkpoint(work, s - 1, scene, store, histories)
                logger.error("iteration %d failed; checkpoint written to %s", s, work)
            raise
        if work is not None:
            _write_checkpoint(work, s, scene, store, histories)
        logger.info("iteration %d/%d done: %d gaussians, %d stored frames",
                    s, h, len(scene), len(store))
    logger.info("render stats: culled=%d degenerate=%d", stats.culled, stats.skipped_degenerate)
    return PipelineResult(scene, store, histories, config, stats)


EVAL_CSV_HEADER = ("frame_index", "psnr", "ssim")


def evaluate(
    scene: GaussianScene,
    heldout: VideoClip,
    cameras: Trajectory,
    background=(0.0, 0.0, 0.0),
) -> list[tuple]:
    """Per-frame PSNR/SSIM of renders against held-out frames, plus a mean row."""
    if len(heldout) != len(cameras):
        raise InvalidParameterError("held-out frames and cameras must align")
    rows: list[tuple] = []
    psnrs: list[float] = []
    ssims: list[float] = []
    for frame, camera, index in zip(heldout.frames, cameras.cameras, heldout.frame_indices):
        rendered = render_color(scene, camera, background)
        p = psnr(rendered, frame)
        s = ssim(rendered, frame)
        rows.append((index, p, s))
        psnrs.append(p)
        ssims.append(s)
    rows.append(("mean", float(np.mean(psnrs)), float(np.mean(ssims))))
    return rows
