from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from typing import Optional, Sequence

from .config import EXPERIMENTS, load_config
from .errors import ConfigError, RoughHestonError
from .experiments import run_experiment
from .kernel import available_presets
from .storage import ResultStore

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

HELP = {
    "smile": "European smile at one maturity for every M",
    "surface": "Implied-vol surface from one simulation per M",
    "asian": "Geometric Asian calls (trapezoidal log-average)",
    "bermudan": "Longstaff-Schwartz Bermudan put",
    "convergence": "Max relative error and local rates over a doubling M grid",
    "kernel-error": "L1 distance between the fractional kernel and its approximations",
}


def _fail(exc: RoughHestonError, code: int) -> int:
    print(f"error[{exc.source or 'rheston'}]: {exc}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim", description="Rough Heston Markovian simulation engine")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="Scenario file (KEY=value)")
        p.add_argument("--seed", type=int, default=None, help="Overrides SEED")
        p.add_argument("--threads", type=int, default=None, help="Worker count (overrides THREADS)")
        p.add_argument("--out", default=None, help="Output directory (overrides OUTPUT_DIR)")
    sub.add_parser("presets", help="List the shipped kernel presets")
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    if args.cmd == "presets":
        for key in available_presets():
            print(key)
        return 0

    overrides = {}
    if args.seed is not None:
        overrides["SEED"] = str(args.seed)
    if args.threads is not None:
        overrides["THREADS"] = str(args.threads)
    if args.out is not None:
        overrides["OUTPUT_DIR"] = args.out

    try:
        cfg = load_config(args.config, experiment=args.cmd, overrides=overrides)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)

    logging.basicConfig(
        level=getattr(logging, cfg.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    started = datetime.now(timezone.utc)
    try:
        result = run_experiment(cfg)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except RoughHestonError as exc:
        return _fail(exc, EXIT_NUMERICAL)

    store = ResultStore(cfg.output_dir)
    csv_path, json_path = store.save(result, cfg, started)
    total = sum(result.wall_times.values())
    print(
        f"Run complete: experiment={result.experiment}, rows={len(result.rows)}, "
        f"clamp_events={result.stats.clamp_events}, floor_events={result.stats.floor_events}, "
        f"simulated in {total:.2f}s. "
        f"Results at {csv_path}, metadata at {json_path}."
    )
    return 0


def main() -> None:
    try:
        sys.exit(run_cli())
    except KeyboardInterrupt:
        print("\nShutting down...")
        sys.exit(130)


if __name__ == "__main__":
    main()
