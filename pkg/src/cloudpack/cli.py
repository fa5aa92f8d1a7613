"""Command line entry point: ``cloudpack --config exp.yaml [overrides]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .errors import ConfigurationError
from .experiment import ExperimentConfig, run_experiment, table_csv


def load_config_file(path) -> dict:
    """Read a YAML or JSON experiment file (JSON is valid YAML, but a
    ``.json`` suffix gets the stricter parser)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cloudpack",
        description="Train forecasters and evaluate VM packing policies; "
                    "writes runs/<id>/table.csv and table.json.")
    p.add_argument("--config", required=True, help="YAML or JSON experiment file")
    p.add_argument("--out-dir", help="root directory for run outputs")
    p.add_argument("--seed", type=int, action="append",
                   help="seed to run (repeatable; replaces the config's seeds)")
    p.add_argument("--epochs", type=int, help="training epochs for every model")
    p.add_argument("--desk-scale", action="store_true",
                   help="reduced defaults: N=3, t0=20, 50 epochs, 2x32 forecaster, lr 3e-3")
    p.add_argument("--jobs", type=int, help="parallel (dataset, workload, seed) units")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    data = load_config_file(args.config)
    overrides = {"out_dir": args.out_dir, "epochs": args.epochs, "jobs": args.jobs,
                 "seeds": args.seed}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data, desk_scale=args.desk_scale)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigurationError, OSError, ValueError, TypeError, yaml.YAMLError) as exc:
        parser.error(str(exc))
    bundle = run_experiment(cfg)
    sys.stdout.write(table_csv(bundle))
    if bundle.failed:
        for err in bundle.errors:
            print(f"error: {err}", file=sys.stderr)
        for (row, col), reps in sorted(bundle.cells.items()):
            for seed, rep in reps:
                if rep.error:
                    print(f"error: {row} {col} seed {seed}: {rep.error}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
