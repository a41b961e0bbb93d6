"""Command line entry point.

    adpfed run      [--config FILE] [--key value ...]
    adpfed compare  [--config FILE] [--key value ...]
    adpfed sweep    [--config FILE] [--key value ...]
    adpfed export-data [--config FILE] [--key value ...]

Keys are the dotted config names, e.g. ``--privacy.p 90 --rounds 20``.
Exit codes: 0 success, 1 every run diverged, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as configmod
from . import harness

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_CONFIG = 2
EXIT_IO = 3

OUT_ENV = "ADPFED_OUT"


def parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise configmod.ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise configmod.ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def resolve_config(config_path: str | None, overrides: list[tuple[str, str]]) -> configmod.ExperimentConfig:
    """defaults < config file < $ADPFED_OUT < command-line flags."""
    cfg = configmod.ExperimentConfig()
    if config_path is not None:
        if not os.path.isfile(config_path):
            raise configmod.ConfigError(f"config file not found: {config_path}")
        try:
            configmod.load(config_path, cfg)
        except OSError as exc:
            raise configmod.ConfigError(f"cannot read config file {config_path}: {exc}") from exc
    env_out = os.environ.get(OUT_ENV)
    if env_out:
        cfg.output_dir = env_out
    for key, value in overrides:
        cfg.set(key, value)
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adpfed", description="Adaptive DP federated learning simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run one configuration R times"),
        ("compare", "NP-FL vs DP-FL vs ADP-FL on identical data and init"),
        ("sweep", "adaptive mode over a list of clipping percentiles"),
        ("export-data", "write the synthetic federation to disk"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress per run")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args.config, parse_overrides(rest))
    except configmod.ConfigError as exc:
        print(f"adpfed: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = cfg.output_dir
    try:
        os.makedirs(out, exist_ok=True)
        if args.command == "run":
            outcomes = harness.run_preset(cfg, out)
        elif args.command == "compare":
            outcomes = [o for runs in harness.compare(cfg, out).values() for o in runs]
        elif args.command == "sweep":
            outcomes = [o for runs in harness.sweep(cfg, out).values() for o in runs]
        else:
            path = harness.export_data(cfg, out)
            print(path)
            return EXIT_OK
    except OSError as exc:
        print(f"adpfed: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # data/privacy validation that only surfaces once building starts
        print(f"adpfed: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    for o in outcomes:
        if o.result.status == "diverged":
            print(f"adpfed: run {o.run} (mode={o.mode}, seed={o.seed}) diverged", file=sys.stderr)
    if harness.all_diverged(outcomes):
        return EXIT_DIVERGED
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
