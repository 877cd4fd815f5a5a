"""Command line entry point: ``fieldcrystal <experiment> --config PATH``.

Exit status is 0 when every assertion passes, 1 when one fails and 2 for
configuration problems (including wraparound risk and non-positive spectra).
"""

from __future__ import annotations

import argparse
import sys

from ..errors import ConfigError, NonPositiveSpectrum, WraparoundRisk
from .config import EXPERIMENTS, load_config
from .experiments import run_experiment


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fieldcrystal",
                                 description="Run a named experiment on the field-crystal model.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="INI configuration file")
    ap.add_argument("--seed", type=int, default=None, help="override [run] seed")
    ap.add_argument("--out", default=None, help="output root (default: [run] out)")
    ap.add_argument("--threads", type=int, default=None, help="worker threads for ensembles")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.experiment)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError(["--threads must be >= 1"])
            cfg.threads = args.threads
        summary = run_experiment(cfg, args.experiment, args.out)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except (WraparoundRisk, NonPositiveSpectrum) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for a in summary["assertions"]:
        verdict = "PASS" if a["passed"] else "FAIL"
        print(f"{verdict} {summary['experiment']}.{a['name']}: {a['measured']:.6g} {a['relation']} {a['threshold']:.6g}")
    return 0 if summary["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
