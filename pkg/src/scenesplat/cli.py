"""Command-line interface: init, render, enhance, run, eval."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .cascade import enhance_window_detailed
from .core import Camera, InvalidParameterError, PipelineConfig, VideoClip
from .diffusion import get_codec
from .optimize import LOSS_CSV_HEADER, loss_history_rows
from .pipeline import (
    EVAL_CSV_HEADER,
    RGBDInput,
    evaluate,
    init_scene_from_rgbd,
    make_denoiser,
    run_pipeline,
    window_indices,
)
from .render import RenderStats, render_color
from .rng import NoiseSource

logger = logging.getLogger("scenesplat")

_CONFIG_FIELDS = {
    "window_length": int, "overlap": int, "lambda0": float, "tau": float,
    "gamma": float, "diffusion_steps": int, "beta_min": float, "beta_max": float,
    "deterministic_sampling": bool, "momentum_noise_convention": str,
    "optimize_steps": int, "densify_interval": int, "opacity_reset_interval": int,
    "s_max": float, "background": tuple, "seed": int, "denoiser": str,
    "codec": str, "init_stride": int,
}


def parse_config_file(path: str | Path) -> dict:
    """Flat key = value document; values use JSON literals (bare words are strings)."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParameterError(f"{path}:{lineno}: expected 'key = value'")
        key, _, text = line.partition("=")
        key, text = key.strip(), text.strip()
        if key not in _CONFIG_FIELDS:
            raise InvalidParameterError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text.strip("\"'")
        values[key] = value
    return values


def build_config(args: argparse.Namespace) -> PipelineConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key in _CONFIG_FIELDS:
        override = getattr(args, key, None)
        if override is not None:
            values[key] = override
    if "background" in values:
        values["background"] = tuple(float(v) for v in values["background"])
    return PipelineConfig(**values)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for key, kind in _CONFIG_FIELDS.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, default=None, type=lambda v: v.lower() in ("1", "true", "yes"))
        elif kind is tuple:
            parser.add_argument(flag, default=None, nargs=3, type=float)
        else:
            parser.add_argument(flag, default=None, type=kind)


def _default_camera(width: int, height: int) -> Camera:
    return Camera(
        fx=float(max(width, height)), fy=float(max(width, height)),
        cx=width / 2.0, cy=height / 2.0, width=width, height=height,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def _load_rgbd(args: argparse.Namespace) -> RGBDInput:
    image = io.load_frame_png(args.rgbd)
    depth = io.load_tensor(args.depth)
    if args.camera:
        camera = io.load_trajectory_json(args.camera).cameras[0]
    else:
        camera = _default_camera(image.width, image.height)
    return RGBDInput(image, depth, camera)


def cmd_init(args: argparse.Namespace) -> int:
    config = build_config(args)
    scene = init_scene_from_rgbd(_load_rgbd(args), config)
    io.save_scene_ply(scene, args.out)
    logger.info("wrote %d gaussians to %s", len(scene), args.out)
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    config = build_config(args)
    scene = io.load_scene_ply(args.scene)
    trajectory = io.load_trajectory_json(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = RenderStats()
    for i, camera in enumerate(trajectory.cameras, start=1):
        frame = render_color(scene, camera, config.background, stats=stats)
        io.save_frame_png(frame, out / f"frame_{i:05d}.png")
    logger.info("rendered %d frames (culled=%d, degenerate=%d)",
                len(trajectory), stats.culled, stats.skipped_degenerate)
    return 0


def cmd_enhance(args: argparse.Namespace) -> int:
    config = build_config(args)
    scene = io.load_scene_ply(args.scene)
    trajectory = io.load_trajectory_json(args.cameras)
    rgbd = _load_rgbd(args)
    if config.s_max is None:
        config = dataclasses.replace(
            config, s_max=max(float(np.quantile(scene.scales, 0.9)), 1e-12))
    indices = window_indices(args.window, config.window_length, config.overlap)
    cams = trajectory.subset(indices)
    n_well = 0 if args.window == 0 else config.overlap
    denoiser = make_denoiser(config.denoiser, config)
    codec = get_codec(config.codec)
    result = enhance_window_detailed(
        scene, cams, rgbd.image, n_well, config, denoiser, codec,
        NoiseSource(config.seed).child(args.window), frame_indices=indices,
    )
    out = Path(args.out)
    for name, clip in (("rendered", result.rendered), ("momentum", result.consistent),
                       ("free", result.free), ("blended", result.blended)):
        sub = out / name
        sub.mkdir(parents=True, exist_ok=True)
        for frame, index in zip(clip.frames, clip.frame_indices):
            io.save_frame_png(frame, sub / f"frame_{index:05d}.png")
    io.save_tensor(np.stack([m.values for m in result.scale_maps]), out / "scale_maps.sstf")
    io.save_tensor(result.momentum.values, out / "pixel_momentum.sstf")
    logger.info("enhance window %d written to %s", args.window, out)
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    rgbd = _load_rgbd(args)
    trajectory = io.load_trajectory_json(args.cameras)
    result = run_pipeline(rgbd, trajectory, config, workdir=args.out, resume=args.resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_scene_ply(result.scene, out / "scene.ply")
    for i, hist in enumerate(result.histories):
        io.write_csv(out / f"loss_iter{i}.csv", LOSS_CSV_HEADER, loss_history_rows(hist))
    logger.info("pipeline finished: %d gaussians, %d frames", len(result.scene),
                len(result.store))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = build_config(args)
    scene = io.load_scene_ply(args.scene)
    trajectory = io.load_trajectory_json(args.cameras)
    frame_paths = sorted(Path(args.heldout).glob("*.png"))
    if len(frame_paths) != len(trajectory):
        raise InvalidParameterError(
            f"{len(frame_paths)} held-out frames vs {len(trajectory)} cameras")
    frames = tuple(io.load_frame_png(p) for p in frame_paths)
    clip = VideoClip(frames, tuple(range(1, len(frames) + 1)))
    rows = evaluate(scene, clip, trajectory, config.background)
    io.write_csv(args.out, EVAL_CSV_HEADER, rows)
    logger.info("metrics for %d frames written to %s", len(frames), args.out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenesplat")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="seed a scene from an RGBD view")
    p.add_argument("--rgbd", required=True, help="input image (PNG)")
    p.add_argument("--depth", required=True, help="depth map (tensor file)")
    p.add_argument("--camera", help="camera JSON (first entry); default synthesized")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("render", help="render a camera path from a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("enhance", help="run one enhancement window and dump intermediates")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--rgbd", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--camera", help="input-view camera JSON")
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("run", help="full iterative reconstruction")
    p.add_argument("--rgbd", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--camera", help="input-view camera JSON")
    p.add_argument("--cameras", required=True, help="trajectory JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="PSNR/SSIM against held-out frames")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--heldout", required=True, help="directory of PNG frames")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except InvalidParameterError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
