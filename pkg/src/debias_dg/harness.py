"""Experiment grid: configuration, per-run persistence and summary tables.

Runs live under ``<out>/<config-hash>/<strategy>/holdout-<domain>/seed-<n>/``.
A run directory is assembled in a temporary sibling and renamed into place
only after every file, ``record.json`` last, has been written, so an
interrupted run never leaves a directory that looks complete.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import load_model, save_model
from .datagen import (ConfoundSpec, RotatedSpec, gen_biased_domains, gen_rotated, lodo_split,
                      read_collection)
from .metrics import C2stConfig, c2st_multi, cross_dataset_report, export_embeddings
from .trainer import (STRATEGIES, TrainConfig, TrainedModel, embed, score, train, validation_score,
                      write_history)

logger = logging.getLogger(__name__)

OUT_ENV = "DEBIAS_DG_OUT"
GENERATORS = ("biased", "rotated")


class ConfigError(ValueError):
    pass


def default_out() -> str:
    return os.environ.get(OUT_ENV, "out")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a strategy x split x seed grid.

    ``data`` is either ``{"generator": "biased" | "rotated", "spec": {...}}``
    (with optional fixed ``"seed"``; otherwise each run seed also seeds the
    data) or ``{"collection": "path/to/dir"}`` for datasets on disk.
    ``holdouts`` is ``"all"`` or a list of domain ids.
    """

    data: dict = field(default_factory=lambda: {"generator": "biased", "spec": {}})
    strategies: list = field(default_factory=lambda: ["erm", "e2e-ce", "mct"])
    train: dict = field(default_factory=dict)
    holdouts: object = "all"
    seeds: list = field(default_factory=lambda: [0])
    out: str = field(default_factory=default_out)
    c2st: dict = field(default_factory=dict)
    eval_split: str = "test"
    export_embeddings: bool = True

    def __post_init__(self):
        if not isinstance(self.data, dict):
            raise ConfigError("data must be a mapping")
        if "collection" in self.data:
            if set(self.data) - {"collection"}:
                raise ConfigError(f"unexpected data keys next to 'collection': {sorted(set(self.data) - {'collection'})}")
        else:
            gen = self.data.get("generator")
            if gen not in GENERATORS:
                raise ConfigError(f"data.generator must be one of {GENERATORS}, got {gen!r}")
            unknown = set(self.data) - {"generator", "spec", "seed"}
            if unknown:
                raise ConfigError(f"unknown data keys: {sorted(unknown)}")
            try:
                self.data_spec()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid data.spec: {exc}") from exc
        if not self.strategies:
            raise ConfigError("strategies must not be empty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; expected a subset of {STRATEGIES}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("strategies must not repeat")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must not repeat")
        if self.holdouts != "all" and not (isinstance(self.holdouts, list) and self.holdouts):
            raise ConfigError("holdouts must be 'all' or a nonempty list of domain ids")
        if self.eval_split not in ("val", "test"):
            raise ConfigError("eval_split must be 'val' or 'test'")
        for key in ("strategy", "seed"):
            if key in self.train:
                raise ConfigError(f"train.{key} is set per run; use the top-level strategies/seeds lists")
        try:
            self.train_config("erm", 0)
            C2stConfig(**self.c2st)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # ---- construction

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        import yaml

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        try:
            d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: cannot parse ({exc.__class__.__name__})") from exc
        return cls.from_dict(d or {})

    def to_dict(self) -> dict:
        return asdict(self)

    # ---- identity

    def identity(self) -> dict:
        """The fields that define the experiment (the output root does not)."""
        d = self.to_dict()
        d.pop("out")
        # defaults are spelled out so that writing a default explicitly does not change the hash
        train = self.train_config("erm", 0).to_dict()
        for key in ("strategy", "seed"):
            train.pop(key)
        d["train"] = train
        c2st = asdict(C2stConfig(**self.c2st))
        c2st["seeds"] = list(c2st["seeds"])
        d["c2st"] = c2st
        if "generator" in self.data:
            d["data"] = dict(self.data, spec=self.data_spec().to_dict())
        return d

    def config_hash(self) -> str:
        return canonical_hash(self.identity())

    def data_source(self) -> str:
        return json.dumps(self.identity()["data"], sort_keys=True, separators=(",", ":"))

    # ---- pieces

    def data_spec(self):
        spec = dict(self.data.get("spec", {}))
        if self.data["generator"] == "biased":
            return ConfoundSpec(**spec)
        return RotatedSpec(**spec)

    def train_config(self, strategy: str, seed: int) -> TrainConfig:
        d = dict(self.train)
        d.update(strategy=strategy, seed=seed)
        return TrainConfig.from_dict(d)

    def load_data(self, seed: int):
        if "collection" in self.data:
            return read_collection(self.data["collection"])
        data_seed = int(self.data.get("seed", seed))
        spec = self.data_spec()
        if self.data["generator"] == "biased":
            return gen_biased_domains(spec, data_seed)
        return gen_rotated(spec, data_seed)

    def holdout_list(self, datasets) -> list:
        ids = [ds.domain_id for ds in datasets]
        if self.holdouts == "all":
            return ids
        for h in self.holdouts:
            if h not in ids:
                raise ConfigError(f"holdout {h!r} is not a domain id; available: {ids}")
        return list(self.holdouts)

    def cells(self, datasets=None) -> list[tuple]:
        if datasets is None:
            datasets = self.load_data(self.seeds[0])
        return [(s, h, seed) for s in self.strategies for h in self.holdout_list(datasets)
                for seed in self.seeds]


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def parse_domain_id(text: str):
    """Domain ids are ints for the built-in generators; anything else stays a string."""
    try:
        return int(text)
    except ValueError:
        return text


# --------------------------------------------------------------------------
# one run


@dataclass
class RunRecord:
    config_hash: str
    data_source: str
    strategy: str
    holdout: object
    seed: int
    report: dict
    final_val: float
    history: str
    checkpoint: str
    wall_clock: float
    complete: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def run_dir(root, config_hash: str, strategy: str, holdout, seed: int) -> Path:
    return Path(root) / config_hash / strategy / f"holdout-{holdout}" / f"seed-{seed}"


def evaluate_model(model: TrainedModel, datasets, holdout, split: str = "test",
                   c2st_config: Optional[C2stConfig] = None):
    """BiasReport for one trained model on its LODO split."""
    internal, external = lodo_split(datasets, holdout, min_internal=1)
    per_domain = {ds.domain_id: score(model, *ds.split(split)) for ds in datasets}
    per_bias = {}
    if model.config.strategy in ("mct", "crossgrad", "e2e-ce", "e2e-svm"):
        for i, ds in enumerate(internal):
            per_bias[ds.domain_id] = score(model, *ds.split(split), head=i)
    c2st_acc = None
    if c2st_config is not None:
        embs = [embed(model.state, ds.split(split)[0]) for ds in datasets]
        c2st_acc = c2st_multi(embs, c2st_config).accuracy
    return cross_dataset_report(per_domain, [d.domain_id for d in internal],
                                [d.domain_id for d in external], c2st_acc, per_bias)


def read_record(directory) -> Optional[RunRecord]:
    path = Path(directory) / "record.json"
    if not path.exists():
        return None
    rec = RunRecord.from_dict(json.loads(path.read_text()))
    return rec if rec.complete else None


def run_cell(config: ExperimentConfig, strategy: str, holdout, seed: int,
             datasets=None) -> RunRecord:
    """Train and evaluate one grid cell, or return its existing complete record."""
    root = Path(config.out)
    chash = config.config_hash()
    final = run_dir(root, chash, strategy, holdout, seed)
    existing = read_record(final)
    if existing is not None:
        logger.info("skipping %s: complete record exists", final)
        return existing
    if final.exists():
        # a directory without a complete record can only come from outside this runner
        raise FileExistsError(f"{final} exists but holds no complete record; remove it to rerun")
    if datasets is None:
        datasets = config.load_data(seed)
    internal, _ = lodo_split(datasets, holdout, min_internal=1)
    t0 = time.perf_counter()
    model = train(config.train_config(strategy, seed), internal)
    final_val = float(model.history[-1]["val_score"]) if model.history else validation_score(model, internal)
    c2st_cfg = C2stConfig(**config.c2st)
    report = evaluate_model(model, datasets, holdout, config.eval_split, c2st_cfg)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.parent / f".tmp-{final.name}-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    write_history(tmp / "history.csv", model.history)
    save_model(tmp / "checkpoint.bin", model)
    (tmp / "report.json").write_text(report.to_json() + "\n")
    if config.export_embeddings:
        export_embeddings(model, datasets, tmp / "embeddings.csv", split=config.eval_split)
    record = RunRecord(chash, config.data_source(), strategy, holdout, seed, report.to_dict(),
                       final_val, "history.csv", "checkpoint.bin", time.perf_counter() - t0)
    (tmp / "record.json").write_text(record.to_json() + "\n")
    try:
        os.rename(tmp, final)
    except OSError:
        shutil.rmtree(tmp, ignore_errors=True)
        done = read_record(final)
        if done is None:
            raise
        return done  # a concurrent runner finished the same cell first
    return record


def _run_cell_job(args) -> RunRecord:
    config_dict, strategy, holdout, seed = args
    return run_cell(ExperimentConfig.from_dict(config_dict), strategy, holdout, seed)


def run_grid(config: ExperimentConfig, jobs: int = 1) -> list[RunRecord]:
    """Run every (strategy, holdout, seed) cell; completed cells are reused, not rerun."""
    root = Path(config.out) / config.config_hash()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(config.identity(), indent=2, sort_keys=True) + "\n")
    if jobs > 1:
        cells = config.cells()
        payload = [(config.to_dict(), s, h, seed) for s, h, seed in cells]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell_job, payload))
    records = []
    for seed in config.seeds:
        datasets = config.load_data(seed)
        for strategy in config.strategies:
            for holdout in config.holdout_list(datasets):
                records.append(run_cell(config, strategy, holdout, seed, datasets))
    return records


def collect_records(root) -> list[RunRecord]:
    """Every complete record below ``root``, in a fixed order."""
    out = []
    for path in sorted(Path(root).rglob("record.json")):
        if any(part.startswith(".tmp-") for part in path.parts):
            continue
        rec = read_record(path.parent)
        if rec is not None:
            out.append(rec)
    return out


def reevaluate(directory, config: Optional[ExperimentConfig] = None) -> dict:
    """Recompute the validation score and report of a finished run from its checkpoint."""
    directory = Path(directory)
    rec = read_record(directory)
    if rec is None:
        raise FileNotFoundError(f"no complete run record in {directory}")
    if config is None:
        cfg_path = directory.parents[2] / "config.json"
        if not cfg_path.exists():
            raise FileNotFoundError(f"cannot find the experiment config at {cfg_path}")
        config = ExperimentConfig.from_dict(dict(json.loads(cfg_path.read_text()), out=str(directory.parents[3])))
    model = load_model(directory / rec.checkpoint)
    datasets = config.load_data(rec.seed)
    internal, _ = lodo_split(datasets, rec.holdout, min_internal=1)
    report = evaluate_model(model, datasets, rec.holdout, config.eval_split, C2stConfig(**config.c2st))
    return {"val_score": validation_score(model, internal), "recorded_val_score": rec.final_val,
            "report": report.to_dict()}


# --------------------------------------------------------------------------
# aggregation


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof = 1); the std of a single value is 0."""
    vals = [float(v) for v in values]
    if not vals:
        return math.nan, math.nan
    mean = math.fsum(vals) / len(vals)
    if len(vals) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var)


SUMMARY_COLUMNS = ("strategy", "split", "n_seeds", "self_mean", "self_std", "others_mean",
                   "others_std", "pd_mean", "pd_std", "c2st_mean", "c2st_std",
                   "bias_self_mean", "bias_self_std")
STRATEGY_COLUMNS = ("strategy", "n_splits", "self_mean", "others_mean", "pd_of_means",
                    "pd_mean_of_splits", "c2st_mean")
BIAS_COLUMNS = ("strategy", "split", "domain", "vw_mean", "bias_head_mean", "n_seeds")


def _sort_key(value):
    """Numeric ids (including numeric strings from JSON keys) sort by value, others by text."""
    try:
        return (0, float(value), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(value))


def _nan_mean_std(values):
    vals = [v for v in values if v is not None]
    return mean_std(vals) if vals else (math.nan, math.nan)


def aggregate(records: Sequence[RunRecord]) -> dict[str, list[dict]]:
    """Summary tables over seeds: per (strategy, split), per strategy, and per bias head."""
    records = list(records)
    if not records:
        raise ValueError("no run records to aggregate")
    sources = sorted({r.data_source for r in records})
    if len(sources) > 1:
        raise ValueError(f"records come from {len(sources)} different data sources; aggregate them separately")
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.strategy, r.holdout), []).append(r)
    summary, bias_rows = [], []
    for (strategy, split) in sorted(groups, key=lambda k: (k[0], _sort_key(k[1]))):
        recs = sorted(groups[(strategy, split)], key=lambda r: r.seed)
        seeds = [r.seed for r in recs]
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"duplicate seeds for ({strategy}, {split}): {seeds}")
        reports = [r.report for r in recs]
        row = {"strategy": strategy, "split": split, "n_seeds": len(recs)}
        for key, name in (("self", "self"), ("others", "others"), ("pd", "pd"), ("c2st_acc", "c2st")):
            row[f"{name}_mean"], row[f"{name}_std"] = _nan_mean_std([rep[key] for rep in reports])
        bias_self = []
        for rep in reports:
            heads = rep.get("per_domain_bias") or {}
            if heads:
                bias_self.append(math.fsum(heads.values()) / len(heads))
        row["bias_self_mean"], row["bias_self_std"] = _nan_mean_std(bias_self)
        summary.append(row)
        domains = sorted({d for rep in reports for d in (rep.get("per_domain_bias") or {})}, key=_sort_key)
        for d in domains:
            vw = [rep["per_domain"][d] for rep in reports if d in (rep.get("per_domain_bias") or {})]
            bh = [rep["per_domain_bias"][d] for rep in reports if d in (rep.get("per_domain_bias") or {})]
            bias_rows.append({"strategy": strategy, "split": split, "domain": d,
                              "vw_mean": mean_std(vw)[0], "bias_head_mean": mean_std(bh)[0],
                              "n_seeds": len(vw)})
    per_strategy = []
    for strategy in sorted({r["strategy"] for r in summary}):
        rows = [r for r in summary if r["strategy"] == strategy]
        self_m = mean_std([r["self_mean"] for r in rows])[0]
        others_m = mean_std([r["others_mean"] for r in rows])[0]
        per_strategy.append({
            "strategy": strategy, "n_splits": len(rows), "self_mean": self_m, "others_mean": others_m,
            "pd_of_means": (self_m - others_m) / self_m if self_m else math.nan,
            "pd_mean_of_splits": _nan_mean_std([r["pd_mean"] for r in rows if not math.isnan(r["pd_mean"])])[0],
            "c2st_mean": _nan_mean_std([r["c2st_mean"] for r in rows if not math.isnan(r["c2st_mean"])])[0],
        })
    return {"summary": summary, "strategies": per_strategy, "bias_heads": bias_rows}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_table(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_report(root, out_dir=None) -> dict[str, Path]:
    """Aggregate the complete records under ``root`` into CSV tables and scatter files."""
    root = Path(root)
    records = collect_records(root)
    if not records:
        raise FileNotFoundError(f"no complete run records under {root}")
    tables = aggregate(records)
    out_dir = Path(out_dir) if out_dir is not None else root / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out_dir / "summary.csv",
        "strategies": out_dir / "strategies.csv",
        "bias_heads": out_dir / "bias_heads.csv",
    }
    write_table(paths["summary"], tables["summary"], SUMMARY_COLUMNS)
    write_table(paths["strategies"], tables["strategies"], STRATEGY_COLUMNS)
    write_table(paths["bias_heads"], tables["bias_heads"], BIAS_COLUMNS)
    # one scatter file per (strategy, split): the lowest seed's 2-D projection
    first = {}
    for r in records:
        key = (r.strategy, r.holdout)
        if key not in first or r.seed < first[key].seed:
            first[key] = r
    for (strategy, split), r in sorted(first.items(), key=lambda kv: (kv[0][0], _sort_key(kv[0][1]))):
        base = root.parent if root.name == r.config_hash else root
        src = run_dir(base, r.config_hash, strategy, split, r.seed) / "embeddings_pca.csv"
        if src.exists():
            dst = out_dir / f"scatter_{strategy}_holdout-{split}.csv"
            dst.write_bytes(src.read_bytes())
            paths[f"scatter:{strategy}:{split}"] = dst
    return paths
