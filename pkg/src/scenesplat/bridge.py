"""Client for out-of-process denoisers speaking the framed tensor protocol.

Wire format, little-endian throughout:

    header: magic b"SSDN" | u8 message type | u32 timestep | u8 tensor count
    per tensor: u8 rank | rank x u64 dims | float32 payload, row-major

Message types: 1 request, 2 response, 3 error. Requests carry two tensors
(noisy latents, condition); responses carry the predicted noise with the
request's latent dims. Error frames carry no tensors; their body is a u32
length followed by a UTF-8 message. A condition of None travels as an empty
rank-1 tensor.
"""

from __future__ import annotations

import collections
import queue
import shlex
import struct
import subprocess
import threading
from typing import BinaryIO, Sequence

import numpy as np

from .core import SceneSplatError

MAGIC = b"SSDN"
MSG_REQUEST = 1
MSG_RESPONSE = 2
MSG_ERROR = 3
HEADER = struct.Struct("<4sBIB")


class ProtocolError(SceneSplatError):
    """Malformed frame on the wire."""


class DenoiserBridgeError(SceneSplatError):
    """The external denoiser failed, timed out, or died."""


def encode_frame(message_type: int, timestep: int, tensors: Sequence[np.ndarray]) -> bytes:
    if len(tensors) > 255:
        raise ProtocolError("too many tensors for one frame")
    parts = [HEADER.pack(MAGIC, message_type, timestep, len(tensors))]
    for tensor in tensors:
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def encode_error_frame(timestep: int, message: str) -> bytes:
    payload = message.encode("utf-8")
    return HEADER.pack(MAGIC, MSG_ERROR, timestep, 0) + struct.pack("<I", len(payload)) + payload


def _read_exact(stream: BinaryIO, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            raise EOFError(f"stream ended with {remaining} bytes missing")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO, resync: bool = False):
    """Read one frame: (message type, timestep, tensors or error message).

    With resync=True, leading garbage is skipped by scanning for the next
    magic sequence instead of failing.
    """
    head = _read_exact(stream, HEADER.size)
    if head[:4] != MAGIC:
        if not resync:
            raise ProtocolError(f"bad magic {head[:4]!r}")
        window = head
        while window[:4] != MAGIC:
            nxt = stream.read(1)
            if not nxt:
                raise EOFError("stream ended while resynchronizing")
            window = window[1:] + nxt
        head = window
    _, message_type, timestep, n_tensors = HEADER.unpack(head)
    if message_type == MSG_ERROR:
        (length,) = struct.unpack("<I", _read_exact(stream, 4))
        return message_type, timestep, _read_exact(stream, length).decode("utf-8")
    tensors = []
    for _ in range(n_tensors):
        (rank,) = struct.unpack("<B", _read_exact(stream, 1))
        dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = _read_exact(stream, 4 * count)
        tensors.append(np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64))
    return message_type, timestep, tensors


class ExternalDenoiser:
    """Spawns a bridge process once and pipes one request per denoiser call."""

    def __init__(self, command: str, timeout: float = 60.0):
        self.command = command
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._responses: queue.Queue = queue.Queue()
        self._stderr_tail: collections.deque[str] = collections.deque(maxlen=20)
        self._lock = threading.Lock()
        self.requests_sent = 0
        self.responses_received = 0

    def _ensure_started(self) -> None:
        # Spawned exactly once; a dead child is a hard failure, not a restart.
        if self._proc is not None:
            return
        self._proc = subprocess.Popen(
            shlex.split(self.command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()

    def _pump_stdout(self) -> None:
        proc = self._proc
        try:
            while True:
                self._responses.put(read_frame(proc.stdout, resync=True))
        except (EOFError, ValueError, ProtocolError):
            self._responses.put(None)

    def _pump_stderr(self) -> None:
        proc = self._proc
        for line in proc.stderr:
            self._stderr_tail.append(line.decode("utf-8", "replace").rstrip())

    def _fail(self, timestep: int, reason: str) -> DenoiserBridgeError:
        tail = "; ".join(self._stderr_tail) or "<no stderr output>"
        return DenoiserBridgeError(
            f"external denoiser failed at timestep t={timestep}: {reason} (stderr: {tail})")

    def __call__(self, z_t: np.ndarray, t: int, condition) -> np.ndarray:
        with self._lock:
            self._ensure_started()
            if self._proc.poll() is not None:
                raise self._fail(t, f"bridge process already exited (code {self._proc.returncode})")
            cond = np.zeros(0) if condition is None else np.asarray(condition, dtype=np.float64)
            frame = encode_frame(MSG_REQUEST, t, [z_t, cond])
            try:
                self._proc.stdin.write(frame)
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise self._fail(t, f"could not send request ({exc})") from exc
            self.requests_sent += 1
            try:
                reply = self._responses.get(timeout=self.timeout)
            except queue.Empty:
                raise self._fail(t, f"no response within {self.timeout}s") from None
            if reply is None:
                raise self._fail(t, "bridge process ended mid-run")
            message_type, reply_t, body = reply
            if message_type == MSG_ERROR:
                raise self._fail(t, f"server error: {body}")
            if message_type != MSG_RESPONSE or not body:
                raise self._fail(t, f"unexpected frame type {message_type}")
            self.responses_received += 1
            eps_hat = body[0]
            if eps_hat.shape != z_t.shape:
                raise self._fail(t, f"response shape {eps_hat.shape} != {z_t.shape}")
            return eps_hat

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self) -> "ExternalDenoiser":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
