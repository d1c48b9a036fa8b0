"""Command-line entry point: ``pfoc CONFIG [--set section.key=value ...]``.

Exit status is 0 on success, 2 for configuration errors (reported with
the file and line) and 1 for runtime failures, which also leave a
``failure.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .config import PRESETS, apply_overrides, load_config, preset, to_text
from .errors import ConfigurationError, ConvergenceError, NumericalError, PfocError

log = logging.getLogger("pfoc")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pfoc",
        description="Optimal control of volume-constrained Allen-Cahn flows with multigrid solvers.")
    ap.add_argument("config", nargs="?", help="experiment configuration file")
    ap.add_argument("--preset", choices=PRESETS, help="start from a named preset instead of a file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one configuration entry (repeatable)")
    ap.add_argument("--output-dir", help="directory for artifacts (overrides [output] dir)")
    ap.add_argument("--threads", type=int, help="kernel threads (ignored in deterministic mode)")
    ap.add_argument("--log-level", default=None, choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    det = ap.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                     help="single-threaded execution for bit-reproducible artifacts")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    ap.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    return ap


def _resolve(args):
    if args.config and args.preset:
        raise ConfigurationError("give either a config file or --preset, not both")
    if args.config:
        cfg = load_config(args.config, args.overrides)
    elif args.preset:
        cfg = apply_overrides(preset(args.preset), args.overrides)
    else:
        raise ConfigurationError("no configuration given; pass a config file or --preset")
    if args.output_dir:
        cfg.output.dir = args.output_dir
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg.run.threads = args.threads
    if args.deterministic is not None:
        cfg.run.deterministic = args.deterministic
    if args.log_level:
        cfg.run.log_level = args.log_level
    return cfg


def _failure_report(exc: BaseException) -> dict:
    report = {"error": type(exc).__name__, "message": str(exc),
              "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__)}
    if isinstance(exc, ConvergenceError):
        report["residual_history"] = [float(v) for v in exc.history]
    if isinstance(exc, NumericalError) and exc.location is not None:
        report["location"] = [int(v) for v in exc.location]
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
    except ConfigurationError as exc:
        print(f"pfoc: configuration error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, cfg.run.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.dump_config:
        sys.stdout.write(to_text(cfg))
        return 0
    from .experiments import run_experiment

    out = Path(cfg.output.dir)
    try:
        summary = run_experiment(cfg, out)
    except ConfigurationError as exc:
        print(f"pfoc: configuration error: {exc}", file=sys.stderr)
        return 2
    except (PfocError, ArithmeticError, ValueError) as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "failure.json").write_text(json.dumps(_failure_report(exc), indent=2) + "\n")
        print(f"pfoc: {cfg.kind} failed: {type(exc).__name__}: {exc} (details in {out / 'failure.json'})",
              file=sys.stderr)
        return 1
    log.info("done in %.1f s", summary.get("wall_time", 0.0))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
