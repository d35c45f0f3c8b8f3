"""File formats: scene PLY, camera JSON, PNG frames, raw float tensors, CSV tables.

The scene PLY follows the community splat layout (binary little-endian,
per-vertex float32 fields x, y, z, scale_*, rot_* (w,x,y,z), opacity,
f_dc_*, f_rest_*). Scale and opacity are stored as plain values, not in
log/logit space.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import (
    Camera,
    GaussianScene,
    ImageFrame,
    InvalidParameterError,
    Trajectory,
    sh_coefficient_count,
)

TENSOR_MAGIC = b"SSTF"
_TENSOR_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TENSOR_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class FormatError(InvalidParameterError):
    """A file does not match its declared format."""


# ---------------------------------------------------------------------------
# Scene PLY


def _ply_property_names(sh_degree: int) -> list[str]:
    names = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    n_rest = 3 * (sh_coefficient_count(sh_degree) - 1)
    names += [f"f_rest_{i}" for i in range(n_rest)]
    return names


def scene_to_ply_bytes(scene: GaussianScene) -> bytes:
    names = _ply_property_names(scene.sh_degree)
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    k = sh_coefficient_count(scene.sh_degree)
    cols = [scene.positions, scene.scales, scene.rotations,
            scene.opacities[:, None], scene.colors[:, 0, :]]
    if k > 1:
        # f_rest is channel-major: all higher coeffs of R, then G, then B.
        rest = scene.colors[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (k - 1))
        cols.append(rest)
    table = np.concatenate(cols, axis=1).astype("<f4")
    return ("\n".join(header) + "\n").encode("ascii") + table.tobytes()


def save_scene_ply(scene: GaussianScene, path: str | Path) -> None:
    Path(path).write_bytes(scene_to_ply_bytes(scene))


def load_scene_ply(path: str | Path) -> GaussianScene:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a binary PLY file")
    header_lines = data[:end].decode("ascii").splitlines()
    names: list[str] = []
    count = 0
    for line in header_lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise FormatError(f"{path}: unsupported property type {parts[1]}")
            names.append(parts[2])
    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    degree = {0: 0, 9: 1, 24: 2}.get(n_rest)
    if degree is None or names != _ply_property_names(degree):
        raise FormatError(f"{path}: unexpected property layout")
    body = data[end + len(b"end_header\n"):]
    table = np.frombuffer(body, dtype="<f4", count=count * len(names))
    table = table.reshape(count, len(names)).astype(np.float64)
    k = sh_coefficient_count(degree)
    colors = np.zeros((count, k, 3))
    colors[:, 0, :] = table[:, 11:14]
    if k > 1:
        colors[:, 1:, :] = table[:, 14:].reshape(count, 3, k - 1).transpose(0, 2, 1)
    return GaussianScene(
        positions=table[:, 0:3], scales=table[:, 3:6], rotations=table[:, 6:10],
        opacities=table[:, 10], colors=colors, sh_degree=degree,
    )


# ---------------------------------------------------------------------------
# Cameras


def camera_to_dict(camera: Camera) -> dict:
    return {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "width": camera.width, "height": camera.height,
        "rotation": [float(v) for v in camera.rotation.reshape(9)],
        "translation": [float(v) for v in camera.translation],
    }


def camera_from_dict(doc: dict) -> Camera:
    try:
        return Camera(
            fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
            width=doc["width"], height=doc["height"],
            rotation=np.asarray(doc["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(doc["translation"], dtype=np.float64),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed camera record: {exc}") from exc


def save_trajectory_json(trajectory: Trajectory, path: str | Path) -> None:
    doc = {"cameras": [camera_to_dict(c) for c in trajectory.cameras]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_trajectory_json(path: str | Path) -> Trajectory:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "cameras" not in doc:
        raise FormatError(f"{path}: missing top-level 'cameras' list")
    return Trajectory(tuple(camera_from_dict(c) for c in doc["cameras"]))


# ---------------------------------------------------------------------------
# Images


def save_frame_png(frame: ImageFrame, path: str | Path) -> None:
    quantized = np.round(frame.pixels * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(str(path))


def load_frame_png(path: str | Path) -> ImageFrame:
    with Image.open(str(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return ImageFrame(arr / 255.0)


# ---------------------------------------------------------------------------
# Raw float tensors: 16-byte header (magic, u8 rank, u8 dtype tag, zero pad),
# then rank u64 dims, then the little-endian payload, row-major.


def save_tensor(array: np.ndarray, path: str | Path, dtype: str = "f4") -> None:
    arr = np.ascontiguousarray(array)
    target = np.dtype("<" + dtype)
    if target not in _TENSOR_TAGS:
        raise FormatError(f"unsupported tensor dtype {dtype}")
    header = TENSOR_MAGIC + struct.pack("<BB", arr.ndim, _TENSOR_TAGS[target])
    header += b"\x00" * (16 - len(header))
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + dims + arr.astype(target).tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a tensor file")
    rank, tag = struct.unpack("<BB", data[4:6])
    if tag not in _TENSOR_DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dims = struct.unpack(f"<{rank}Q", data[16:16 + 8 * rank])
    dtype = _TENSOR_DTYPES[tag]
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(data, dtype=dtype, count=count, offset=16 + 8 * rank)
    return payload.reshape(dims).astype(np.float64)


# ---------------------------------------------------------------------------
# CSV tables


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
