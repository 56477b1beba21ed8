"""``urbanpriv-exp`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .crosslocality import read_kv_file
from .core import ValidationError
from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, run_experiment, write_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

log = logging.getLogger("urbanpriv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit 2 already; keep the message terse
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="urbanpriv-exp", description="Run a desk-scale experiment and write a CSV.")
    p.add_argument("--experiment", required=True, help="one of: " + ", ".join(EXPERIMENTS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--config", default=None, help="flat key=value file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="parameter override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _split(kv: str) -> tuple[str, str]:
    if "=" not in kv:
        raise ConfigError(f"override {kv!r} is not key=value")
    k, v = kv.split("=", 1)
    return k.strip(), v.strip()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        file_cfg = {}
        if args.config:
            try:
                file_cfg = read_kv_file(args.config)
            except OSError as exc:
                print(f"cannot read config: {exc}", file=sys.stderr)
                return EXIT_IO
        seed = args.seed if args.seed is not None else int(file_cfg.pop("seed", 0))
        file_trials = file_cfg.pop("trials", None)
        trials = args.trials if args.trials is not None else (int(file_trials) if file_trials else None)
        out = args.out if args.out is not None else file_cfg.pop("out", None)
        file_cfg.pop("out", None)
        overrides = dict(file_cfg)
        overrides.update(_split(kv) for kv in args.set)
        cfg = ExperimentConfig(args.experiment, seed, trials, out, overrides)
        t0 = time.perf_counter()
        result = run_experiment(cfg)
        log.info("%s: %d rows in %.2f s", cfg.experiment, len(result.rows), time.perf_counter() - t0)
    except (ConfigError, ValidationError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if cfg.output_path:
            write_csv(result, cfg.output_path)
        else:
            write_csv(result, "/dev/stdout")
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
