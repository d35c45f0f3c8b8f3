"""Scene refinement: loss-driven parameter updates plus the densify/prune/reset schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    SCALE_EPS,
    GaussianScene,
    InvalidParameterError,
    SceneSplatError,
    Trajectory,
    VideoClip,
    validate_scene,
)
from .metrics import gs_loss_detailed
from .render import render_color, render_gradients

logger = logging.getLogger(__name__)

OPACITY_CAP = 1.0 - 1e-7
SPLIT_SCALE_SHRINK = 1.6


class OptimizationError(SceneSplatError):
    """Refinement aborted; carries a scene snapshot for post-mortems."""

    def __init__(self, message: str, snapshot: GaussianScene | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class OptimizeConfig:
    """Step sizes and the densification schedule.

    position_lr is multiplied by the scene extent and decays exponentially to
    position_lr_final_ratio of its start over the run; the other rates are
    flat. densify_size_ratio is relative to the scene extent.
    """

    steps: int = 5000
    gamma: float = 0.2
    position_lr: float = 1.6e-4
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    opacity_lr: float = 5e-2
    color_lr: float = 2.5e-3
    momentum: float = 0.9
    position_lr_final_ratio: float = 0.01
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_size_ratio: float = 0.01
    prune_opacity_threshold: float = 5e-3
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 1e-2
    max_primitives: int | None = None  # densify growth stops at this count
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidParameterError("steps must be >= 0")
        if self.densify_interval < 1 or self.opacity_reset_interval < 1:
            raise InvalidParameterError("schedule intervals must be >= 1")
        for name in ("densify_grad_threshold", "prune_opacity_threshold",
                     "opacity_reset_value", "densify_size_ratio"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidParameterError("gamma must lie in [0, 1]")


@dataclass
class LossEntry:
    step: int
    frame_index: int
    loss: float
    l1: float
    ssim_term: float
    num_gaussians: int


LOSS_CSV_HEADER = ("step", "frame_index", "loss", "l1", "ssim_term", "num_gaussians")


def loss_history_rows(history: list[LossEntry]) -> list[tuple]:
    return [(e.step, e.frame_index, e.loss, e.l1, e.ssim_term, e.num_gaussians)
            for e in history]


def densify_prune_reset(
    scene: GaussianScene,
    accumulated_gradients: np.ndarray,
    step: int,
    config: OptimizeConfig,
    extent: float | None = None,
) -> GaussianScene:
    """Apply whichever schedule actions fire at this step.

    Densify steps: qualifying primitives (mean positional-gradient norm at or
    above the threshold) are cloned when small, or replaced by two copies with
    scale / 1.6 offset along the major axis when large; then primitives below
    the prune opacity are dropped. Reset steps cap every opacity at the reset
    value. Reset applies after densify when both fire.
    """
    grads = np.asarray(accumulated_gradients, dtype=np.float64)
    if grads.shape != (len(scene),):
        raise InvalidParameterError("gradient accumulator must align with the scene")
    extent = scene.extent() if extent is None else extent

    positions = scene.positions
    scales = scene.scales
    rotations = scene.rotations
    opacities = scene.opacities
    colors = scene.colors

    grow = config.max_primitives is None or len(scene) < config.max_primitives
    if step % config.densify_interval == 0:
        size_threshold = config.densify_size_ratio * extent
        qualify = grads >= config.densify_grad_threshold if grow else np.zeros(len(scene), bool)
        small = scales.max(axis=1) < size_threshold
        clone = qualify & small
        split = qualify & ~small

        keep = ~split
        parts = {
            "positions": [positions[keep], positions[clone]],
            "scales": [scales[keep], scales[clone]],
            "rotations": [rotations[keep], rotations[clone]],
            "opacities": [opacities[keep], opacities[clone]],
            "colors": [colors[keep], colors[clone]],
        }
        if split.any():
            # Two children per split, displaced along the world-space major
            # axis by half its extent, with all axes shrunk.
            idx = np.flatnonzero(split)
            axis_k = scales[idx].argmax(axis=1)
            rot_mats = np.stack([_rotation_from_quat(rotations[i]) for i in idx])
            major_dir = rot_mats[np.arange(idx.size), :, axis_k]
            offset = major_dir * (scales[idx, axis_k][:, None] * 0.5)
            child_scale = scales[idx] / SPLIT_SCALE_SHRINK
            for sign in (1.0, -1.0):
                parts["positions"].append(positions[idx] + sign * offset)
                parts["scales"].append(child_scale)
                parts["rotations"].append(rotations[idx])
                parts["opacities"].append(opacities[idx])
                parts["colors"].append(colors[idx])
        positions = np.concatenate(parts["positions"])
        scales = np.concatenate(parts["scales"])
        rotations = np.concatenate(parts["rotations"])
        opacities = np.concatenate(parts["opacities"])
        colors = np.concatenate(parts["colors"])

        survivors = opacities >= config.prune_opacity_threshold
        positions = positions[survivors]
        scales = scales[survivors]
        rotations = rotations[survivors]
        opacities = opacities[survivors]
        colors = colors[survivors]

    if step % config.opacity_reset_interval == 0:
        opacities = np.minimum(opacities, config.opacity_reset_value)

    return GaussianScene(positions, scales, rotations, opacities, colors,
                         scene.sh_degree, scene.metadata)


def _rotation_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def optimize_scene(
    scene: GaussianScene,
    supervision: VideoClip,
    cameras: Trajectory,
    config: OptimizeConfig,
) -> tuple[GaussianScene, list[LossEntry]]:
    """Heavy-ball gradient descent against the supervision frames.

    Frames are visited round-robin. Parameters are clamped back to their
    invariants after every update, so the scene stays valid throughout.
    """
    if len(supervision) != len(cameras):
        raise InvalidParameterError("supervision frames and cameras must align")
    if len(supervision) == 0:
        raise InvalidParameterError("supervision must be non-empty")
    violations = validate_scene(scene)
    if violations:
        raise InvalidParameterError(f"scene invalid before refinement: {violations[0]}")

    positions = scene.positions.copy()
    scales = scene.scales.copy()
    rotations = scene.rotations.copy()
    opacities = scene.opacities.copy()
    colors = scene.colors.copy()

    extent = scene.extent()
    pos_lr0 = config.position_lr * extent
    velocity = _zero_velocity(len(scene), colors.shape[1])
    accum = np.zeros(len(scene))
    accum_steps = 0
    history: list[LossEntry] = []
    targets = supervision.as_array()

    for step in range(1, config.steps + 1):
        pick = (step - 1) % len(cameras)
        camera = cameras.cameras[pick]
        current = GaussianScene(positions, scales, rotations, opacities, colors,
                                scene.sh_degree, scene.metadata)
        rendered = render_color(current, camera, config.background)
        detail = gs_loss_detailed(rendered, targets[pick], config.gamma)
        if not np.isfinite(detail.loss):
            raise OptimizationError(
                f"non-finite loss at step {step} (frame {supervision.frame_indices[pick]})",
                snapshot=current,
            )
        grads = render_gradients(current, camera, detail.gradient, config.background)

        decay = config.position_lr_final_ratio ** (step / max(config.steps, 1))
        velocity["positions"] = config.momentum * velocity["positions"] + grads.positions
        velocity["scales"] = config.momentum * velocity["scales"] + grads.scales
        velocity["rotations"] = config.momentum * velocity["rotations"] + grads.rotations
        velocity["opacities"] = config.momentum * velocity["opacities"] + grads.opacities
        velocity["colors"] = config.momentum * velocity["colors"] + grads.colors
        positions -= pos_lr0 * decay * velocity["positions"]
        scales -= config.scale_lr * velocity["scales"]
        rotations -= config.rotation_lr * velocity["rotations"]
        opacities -= config.opacity_lr * velocity["opacities"]
        colors -= config.color_lr * velocity["colors"]

        scales = np.clip(scales, SCALE_EPS, None)
        opacities = np.clip(opacities, 0.0, OPACITY_CAP)
        norms = np.linalg.norm(rotations, axis=1, keepdims=True)
        bad = (norms[:, 0] == 0) | ~np.isfinite(norms[:, 0])
        rotations[bad] = (1.0, 0.0, 0.0, 0.0)
        norms[bad] = 1.0
        rotations = rotations / norms

        accum += np.linalg.norm(grads.positions, axis=1)
        accum_steps += 1
        history.append(LossEntry(step, supervision.frame_indices[pick], detail.loss,
                                 detail.l1, detail.ssim_term, positions.shape[0]))

        densify_now = step % config.densify_interval == 0
        reset_now = step % config.opacity_reset_interval == 0
        if densify_now or reset_now:
            current = GaussianScene(positions, scales, rotations, opacities, colors,
                                    scene.sh_degree, scene.metadata)
            mean_grads = accum / max(accum_steps, 1) if densify_now else np.zeros(len(current))
            updated = densify_prune_reset(current, mean_grads, step, config, extent)
            if len(updated) != len(current) or densify_now:
                velocity = _zero_velocity(len(updated), colors.shape[1])
                accum = np.zeros(len(updated))
                accum_steps = 0
            positions = updated.positions.copy()
            scales = updated.scales.copy()
            rotations = updated.rotations.copy()
            opacities = updated.opacities.copy()
            colors = updated.colors.copy()

    final = GaussianScene(positions, scales, rotations, opacities, colors,
                          scene.sh_degree, scene.metadata)
    return final, history


def _zero_velocity(n: int, k: int) -> dict[str, np.ndarray]:
    return {
        "positions": np.zeros((n, 3)),
        "scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "opacities": np.zeros(n),
        "colors": np.zeros((n, k, 3)),
    }
