"""Framed tensor protocol, server side.

Layout (little-endian): magic b"SSDN" | u8 type | u32 timestep | u8 tensor
count; per tensor u8 rank | rank x u64 dims | float32 payload. Types:
1 request, 2 response, 3 error. Error frames carry a u32 length + UTF-8
message instead of tensors. Tensor ranks outside [1, 8] or absurd dims are
treated as corruption so a reader can resynchronize on the next magic.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"SSDN"
MSG_REQUEST = 1
MSG_RESPONSE = 2
MSG_ERROR = 3
HEADER = struct.Struct("<4sBIB")
MAX_RANK = 8
MAX_ELEMENTS = 1 << 30


class ProtocolError(ValueError):
    pass


def encode_frame(message_type: int, timestep: int, tensors: Sequence[np.ndarray]) -> bytes:
    parts = [HEADER.pack(MAGIC, message_type, timestep, len(tensors))]
    for tensor in tensors:
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def encode_error(timestep: int, message: str) -> bytes:
    payload = message.encode("utf-8")
    return HEADER.pack(MAGIC, MSG_ERROR, timestep, 0) + struct.pack("<I", len(payload)) + payload


def read_exact(stream: BinaryIO, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            raise EOFError(f"{remaining} bytes missing")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def scan_to_magic(stream: BinaryIO) -> bytes:
    """Consume bytes until a magic sequence starts; returns the header bytes."""
    window = read_exact(stream, HEADER.size)
    while window[:4] != MAGIC:
        nxt = stream.read(1)
        if not nxt:
            raise EOFError("no further frames")
        window = window[1:] + nxt
    return window


def read_frame(stream: BinaryIO, header: bytes | None = None):
    """Decode one frame; raises ProtocolError on structural corruption."""
    head = header if header is not None else read_exact(stream, HEADER.size)
    magic, message_type, timestep, n_tensors = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if message_type not in (MSG_REQUEST, MSG_RESPONSE, MSG_ERROR):
        raise ProtocolError(f"unknown message type {message_type}")
    if message_type == MSG_ERROR:
        (length,) = struct.unpack("<I", read_exact(stream, 4))
        return message_type, timestep, read_exact(stream, length).decode("utf-8")
    tensors = []
    for _ in range(n_tensors):
        (rank,) = struct.unpack("<B", read_exact(stream, 1))
        if not 1 <= rank <= MAX_RANK:
            raise ProtocolError(f"tensor rank {rank} out of range")
        dims = struct.unpack(f"<{rank}Q", read_exact(stream, 8 * rank))
        count = 1
        for d in dims:
            count *= d
        if count > MAX_ELEMENTS:
            raise ProtocolError(f"tensor of {count} elements rejected")
        payload = read_exact(stream, 4 * count)
        tensors.append(np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64))
    return message_type, timestep, tensors
