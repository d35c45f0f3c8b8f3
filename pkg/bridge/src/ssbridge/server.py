"""Serve loop: read request frames, evaluate the wrapped denoiser, reply.

Denoiser exceptions become error frames and the loop continues; structural
corruption also produces an error frame, after which the reader scans forward
to the next magic sequence. The loop ends at EOF.
"""

from __future__ import annotations

import sys
from typing import BinaryIO

from .protocol import (
    MSG_REQUEST,
    ProtocolError,
    encode_error,
    encode_frame,
    read_frame,
    scan_to_magic,
)


def serve(denoiser, stdin: BinaryIO, stdout: BinaryIO, fail_after: int | None = None) -> int:
    """Answer requests until EOF; returns the number of requests served."""
    served = 0
    resync = False
    while True:
        try:
            header = scan_to_magic(stdin) if resync else None
            resync = False
            kind, timestep, body = read_frame(stdin, header)
        except EOFError:
            return served
        except ProtocolError as exc:
            stdout.write(encode_error(0, f"malformed frame: {exc}"))
            stdout.flush()
            resync = True
            continue
        if kind != MSG_REQUEST:
            stdout.write(encode_error(timestep, f"unexpected frame type {kind}"))
            stdout.flush()
            continue
        try:
            z_t = body[0]
            condition = body[1] if len(body) > 1 else None
            eps_hat = denoiser(z_t, timestep, condition)
            if eps_hat.shape != z_t.shape:
                raise ValueError(f"denoiser shape {eps_hat.shape} != {z_t.shape}")
            stdout.write(encode_frame(2, timestep, [eps_hat]))
            stdout.flush()
        except Exception as exc:  # noqa: BLE001 - every failure becomes an error frame
            stdout.write(encode_error(timestep, f"{type(exc).__name__}: {exc}"))
            stdout.flush()
            continue
        served += 1
        if fail_after is not None and served >= fail_after:
            print(f"exiting after {served} requests as instructed", file=sys.stderr)
            return served
