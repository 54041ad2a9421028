"""``mossfl`` command line: partition, run, report.

Exit codes: 0 success, 2 config/schema error, 3 training or transfer
divergence, 4 I/O error.  ``MOSSFL_OUT_DIR`` overrides ``--out`` and
``MOSSFL_THREADS`` overrides ``--threads``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import artifacts
from .config import ConfigError, load_config, load_partition_config
from .data import (CapacityError, DataDomainError, dirichlet_partition, load_dataset,
                   load_digits_dataset, sample_public)
from .models import TrainingDivergence
from .orchestrator import RoundAborted, Simulation

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mossfl")


def _out(args) -> Path:
    return Path(os.environ.get("MOSSFL_OUT_DIR") or args.out)


def _threads(args, default: int) -> int:
    env = os.environ.get("MOSSFL_THREADS")
    if env:
        return int(env)
    return args.threads if args.threads is not None else default


def cmd_partition(args) -> int:
    cfg = load_partition_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    dataset = load_digits_dataset() if args.dataset == "digits" else load_dataset(args.dataset)
    try:
        part = dirichlet_partition(dataset, cfg.n_devices, cfg.alpha, cfg.samples_per_device, seed)
        taken = [i for shard in part.device_shards for i in shard]
        part.public_ids = sample_public(dataset, taken, cfg.public_size, seed + 1)
    except (CapacityError, DataDomainError) as exc:
        raise ConfigError(str(exc)) from None
    part.validate(dataset, cfg.samples_per_device)
    out = _out(args)
    if out.suffix != ".json":
        out = out / "partition.json"
    artifacts.atomic_write(out, part.to_json())
    print(out)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    for name in args.ablation or []:
        cfg = cfg.with_ablation(name)
    update = {"threads": _threads(args, cfg.threads)}
    if args.seed is not None:
        update["seed"] = args.seed
    cfg = cfg.model_copy(update=update)
    torch.set_num_threads(cfg.threads)
    started = datetime.now(timezone.utc)
    sim = Simulation(cfg)
    try:
        sim.run(on_record=lambda r: log.info("round %d accuracy %s", r.round, r.accuracy))
    finally:
        sim.close()
    out = _out(args)
    artifacts.write_run(out, sim, started)
    print(out)
    return EXIT_OK


def cmd_report(args) -> int:
    paths = artifacts.write_report(args.runs, _out(args))
    sys.stdout.write(paths["table"].read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mossfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="write a Dirichlet device partition as JSON")
    p.add_argument("--dataset", default="digits", help="dataset archive/directory, or 'digits'")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output .json file or directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--ablation", action="append",
                   help="no-prom, no-file, ce-only, location-only, ce-mse, reinit-meta (repeatable)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=".", help="directory for report.csv, report.txt, accuracy.png")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RoundAborted, TrainingDivergence) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
