"""Command-line entry point: ``edge-mpc run ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from .harness import (
    EXIT_MISSION_FAILED, EXIT_PARTIAL, MODES, ExperimentConfig, run_horizon_sweep, run_rate_sweep,
    run_trajectory,
)

log = logging.getLogger("edge_mpc")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edge-mpc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a sweep or a trajectory mission")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--trajectory", choices=("circle", "spiral", "hover"))
    run.add_argument("--rate", type=float, help="control rate in Hz")
    run.add_argument("--horizon", type=int, help="prediction horizon N")
    run.add_argument("--rates", type=float, nargs="+", help="rate sweep values")
    run.add_argument("--horizons", type=int, nargs="+", help="horizon sweep values")
    run.add_argument("--delay-ms", type=float, help="injected one-way delay")
    run.add_argument("--duration", type=float, help="seconds per run (sweeps) or mission limit")
    run.add_argument("--out", help="output directory")
    run.add_argument("--config", help="flat JSON config; flags override its values")
    run.add_argument("--virtual-time", action="store_true", default=None,
                     help="lockstep simulation instead of two real-time processes")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = ("mode", "trajectory", "rate", "horizon", "rates", "horizons", "delay_ms", "duration", "out",
            "virtual_time")
    return {k: getattr(args, k) for k in keys}


def _report_sweep(result) -> int:
    for param, s in result.stats:
        print(f"{result.name}={param:g}: median {s.median:.3f} ms  IQR {s.iqr:.3f} ms  "
              f"[{s.min:.3f}, {s.max:.3f}]")
    if result.failed:
        print(f"failed runs: {result.failed}", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = ExperimentConfig.load(args.config, **_overrides(args))
    except (OSError, ValueError, TypeError) as exc:
        parser.error(str(exc))

    if exp.mode == "horizon":
        return _report_sweep(run_horizon_sweep(exp))
    if exp.mode == "rate":
        return _report_sweep(run_rate_sweep(exp))

    res = run_trajectory(exp)
    err = res.run.tracking_errors()
    if len(err):
        print(f"tracking error: max {err.max():.3f} m  p99 {np.percentile(err, 99):.3f} m  "
              f"({len(err)} samples)")
    print(f"mission {'done' if res.run.done else 'NOT done'} (limit {res.limit_s:.1f} s), "
          f"deadline misses {res.run.deadline_misses}")
    return 0 if res.ok else EXIT_MISSION_FAILED


if __name__ == "__main__":
    sys.exit(main())
