"""Command line driver of the particle tracking demo."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .config import PRESETS, SimConfig, preset

log = logging.getLogger("octforest.particles")


def _levels(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must look like MIN:MAX, got {text!r}")
    return lo, hi


def _brick(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"brick must look like KX,KY,KZ, got {text!r}")
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("brick needs three entries")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="octforest-particles",
        description="Track particles around three suns on an adaptive forest of octrees "
                    "distributed over simulated ranks.")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named setup")
    p.add_argument("--particles", type=int, help="requested particle count")
    p.add_argument("--elem-max", type=int, help="maximum particles per element E")
    p.add_argument("--levels", type=_levels, help="minimum and maximum level, MIN:MAX")
    p.add_argument("--rk", type=int, choices=[1, 2, 3, 4], help="Runge-Kutta order")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--T", type=float, dest="T", help="final time")
    p.add_argument("--ranks", type=int, default=1, help="number of simulated ranks")
    p.add_argument("--brick", type=_brick, help="trees per direction, KX,KY,KZ")
    p.add_argument("--snapshot-every", type=int, help="steps between sparse snapshots (0: end only)")
    p.add_argument("--subsample", type=int, help="keep every R-th particle for snapshots and plots")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count-mode", choices=["round", "exact"],
                   help="per-element rounding of particle counts or exact total")
    p.add_argument("--out", help="directory for statistics, files and figures")
    p.add_argument("--no-check", action="store_true", help="skip the per-stage invariant checks")
    p.add_argument("--no-figures", action="store_true", help="do not render figures")
    p.add_argument("--quiet", action="store_true", help="do not echo statistics to stdout")
    return p


def config_from_args(args: argparse.Namespace) -> SimConfig:
    base = dict(PRESETS[args.preset]) if args.preset else {}
    changes = {"ranks": args.ranks, "seed": args.seed, "check": not args.no_check}
    for name in ("particles", "elem_max", "rk", "dt", "T", "brick", "snapshot_every",
                 "subsample", "count_mode"):
        v = getattr(args, name)
        if v is not None:
            changes[name] = v
    if args.levels is not None:
        changes["min_level"], changes["max_level"] = args.levels
    if args.preset:
        return preset(args.preset, **changes)
    return SimConfig(**{**base, **changes}).validate()


def main(argv: list[str] | None = None) -> int:
    from . import report
    from .sim import InvariantError, run

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
    except (ValueError, KeyError) as exc:
        parser.error(str(exc))

    stats_fh = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "config.json"), "w") as fh:
            json.dump(cfg.as_dict(), fh, indent=1)
        stats_fh = open(os.path.join(args.out, "stats.jsonl"), "w")

    def emit(rec: dict) -> None:
        line = json.dumps(rec)
        if not args.quiet:
            print(line, flush=True)
        if stats_fh is not None:
            stats_fh.write(line + "\n")

    log.info("running %d steps of RK%d on %d ranks", cfg.steps, cfg.rk, cfg.ranks)
    start = time.perf_counter()
    try:
        result = run(cfg, emit, args.out)
    except InvariantError as exc:
        log.error("invariant violated: %s", exc)
        return 2
    finally:
        if stats_fh is not None:
            stats_fh.close()
    log.info("finished in %.1f s: %d particles, %d elements", time.perf_counter() - start,
             result.records[-1]["particles"], result.records[-1]["elements"])

    if args.out:
        with open(os.path.join(args.out, "timings.jsonl"), "w") as fh:
            for t in result.timings:
                fh.write(json.dumps(t) + "\n")
        with open(os.path.join(args.out, "snapshots.jsonl"), "w") as fh:
            for s in result.snapshots:
                fh.write(json.dumps(s) + "\n")
        if not args.no_figures:
            for path in report.write_figures(result, args.out):
                log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
