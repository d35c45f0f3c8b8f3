"""CLI: serve a denoiser over stdio frames."""

from __future__ import annotations

import argparse
import sys

from .denoisers import Schedule, build_denoiser
from .server import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ssbridge")
    parser.add_argument("--denoiser", default="zero",
                        help="zero | condition-oracle | oracle-file:<path> | gaussian:<mean>,<std>")
    parser.add_argument("--timesteps", type=int, default=50)
    parser.add_argument("--beta-min", type=float, default=1e-4)
    parser.add_argument("--beta-max", type=float, default=0.02)
    parser.add_argument("--fail-after", type=int, default=None,
                        help="exit after N requests (testing aid)")
    args = parser.parse_args(argv)
    schedule = Schedule(args.timesteps, args.beta_min, args.beta_max)
    denoiser = build_denoiser(args.denoiser, schedule)
    served = serve(denoiser, sys.stdin.buffer, sys.stdout.buffer, args.fail_after)
    print(f"served {served} requests", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
