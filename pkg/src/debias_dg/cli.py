"""Command-line entry point: ``debias-dg {gen-data,train,eval,c2st,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datagen import ConfoundSpec, RotatedSpec, gen_biased_domains, gen_rotated, read_collection, write_collection
from .harness import (ConfigError, ExperimentConfig, default_out, parse_domain_id, reevaluate, run_grid,
                      write_report)
from .metrics import C2stConfig, c2st_multi


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line diagnostic instead of usage + message
        raise CliError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="debias-dg", description="Multi-source domain generalization experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset collection")
    g.add_argument("--config", help="experiment config whose data section is used")
    g.add_argument("--generator", choices=("biased", "rotated"), default="biased")
    g.add_argument("--n-per-domain", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="target directory (default: $DEBIAS_DG_OUT/data-<generator>-seed<N>)")

    t = sub.add_parser("train", help="run the strategy x holdout x seed grid")
    t.add_argument("--config", help="YAML or JSON experiment config")
    t.add_argument("--strategy", help="strategy name or comma-separated list")
    t.add_argument("--holdout", help="held-out domain id or comma-separated list")
    t.add_argument("--seed", help="seed or comma-separated list")
    t.add_argument("--out", help="output root (default: $DEBIAS_DG_OUT or ./out)")
    t.add_argument("--epsilon", type=float)
    t.add_argument("--eta", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--tap-set", help="default | all | all-but-last | comma-separated tap names")
    t.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    e = sub.add_parser("eval", help="recompute metrics of a finished run from its checkpoint")
    e.add_argument("run", help="run directory holding record.json and checkpoint.bin")
    e.add_argument("--config", help="experiment config (default: the config.json saved with the run)")

    c = sub.add_parser("c2st", help="classifier two-sample test between domains")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset collection directory (raw features)")
    src.add_argument("--embeddings", help="embeddings CSV written by a run")
    c.add_argument("--domains", help="comma-separated domain ids to compare (default: all)")
    c.add_argument("--split", default="test", choices=("train", "val", "test"))
    c.add_argument("--probe", default="linear", choices=("linear", "mlp"))

    r = sub.add_parser("report", help="aggregate complete runs into summary CSVs")
    r.add_argument("--out", help="output root or one experiment's hash directory")
    r.add_argument("--config", help="report only the experiment defined by this config")
    return p


def _split_list(text: Optional[str]) -> Optional[list[str]]:
    if text is None:
        return None
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise CliError(f"empty list: {text!r}")
    return items


def _experiment(args) -> ExperimentConfig:
    d = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    if getattr(args, "out", None):
        d["out"] = args.out
    if getattr(args, "strategy", None):
        d["strategies"] = _split_list(args.strategy)
    if getattr(args, "holdout", None):
        d["holdouts"] = [parse_domain_id(h) for h in _split_list(args.holdout)]
    if getattr(args, "seed", None) is not None:
        try:
            d["seeds"] = [int(s) for s in _split_list(str(args.seed))]
        except ValueError:
            raise CliError(f"--seed expects integers, got {args.seed!r}") from None
    train = dict(d.get("train", {}))
    for flag, key in (("epsilon", "epsilon"), ("eta", "eta"), ("steps", "steps"), ("tap_set", "tap_set")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    d["train"] = train
    return ExperimentConfig.from_dict(d)


def cmd_gen_data(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if "collection" in cfg.data:
            raise CliError("config data section points at files; nothing to generate")
        gen, spec = cfg.data["generator"], cfg.data_spec()
    else:
        gen = args.generator
        spec = ConfoundSpec() if gen == "biased" else RotatedSpec()
    if args.n_per_domain is not None:
        if args.n_per_domain < 1:
            raise CliError("--n-per-domain must be positive")
        spec.n_per_domain = args.n_per_domain
    data = gen_biased_domains(spec, args.seed) if gen == "biased" else gen_rotated(spec, args.seed)
    out = Path(args.out) if args.out else Path(default_out()) / f"data-{gen}-seed{args.seed}"
    path = write_collection(data, out)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1")
    records = run_grid(cfg, jobs=args.jobs)
    root = Path(cfg.out) / cfg.config_hash()
    print(f"config {cfg.config_hash()} -> {root}")
    for r in records:
        rep = r.report
        print(f"{r.strategy}\tholdout={r.holdout}\tseed={r.seed}\tself={rep['self']:.4f}"
              f"\tothers={rep['others']:.4f}\tval={r.final_val:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    result = reevaluate(args.run, cfg)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _embedding_groups(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"embeddings file not found: {path}")
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["domain", "label"]:
            raise CliError(f"{path}: expected a header starting with domain,label")
        for row in reader:
            groups.setdefault(row[0], []).append([float(v) for v in row[2:]])
    return {k: np.array(v) for k, v in groups.items()}


def cmd_c2st(args) -> int:
    if args.data:
        groups = {str(ds.domain_id): ds.split(args.split)[0] for ds in read_collection(args.data)}
    else:
        groups = _embedding_groups(Path(args.embeddings))
    names = _split_list(args.domains) or list(groups)
    missing = [n for n in names if n not in groups]
    if missing:
        raise CliError(f"unknown domains {missing}; available: {list(groups)}")
    if len(names) < 2:
        raise CliError("need at least two domains to compare")
    res = c2st_multi([groups[n] for n in names], C2stConfig(probe=args.probe))
    print(json.dumps({"domains": names, "accuracy": res.accuracy, "per_seed": res.per_seed,
                      "chance": res.chance, "p_value": res.p_value, "different": res.different},
                     indent=2))
    return 0


def cmd_report(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        out = args.out or cfg.out
        root = Path(out) / cfg.config_hash()
    else:
        root = Path(args.out or default_out())
    paths = write_report(root)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "c2st": cmd_c2st,
            "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except CliError as exc:
        print(f"debias-dg: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else exc.__class__.__name__
        print(f"debias-dg: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
