"""Bias and performance measurement: AUC, performance drop, classifier two-sample test."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape[0]} vs {labels.shape[0]}")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes; got {n_pos} positives and {n_neg} negatives")
    ranks = stats.rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AUC over label columns that contain both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    values = []
    for k in range(labels.shape[1]):
        col = labels[:, k]
        if col.min() == col.max():
            logger.debug("label column %d has a single class; skipped in macro AUC", k)
            continue
        values.append(auc(scores[:, k], col))
    if not values:
        raise ValueError("no label column has both classes")
    return float(np.mean(values))


def performance_drop(self_score: float, others: float) -> Optional[float]:
    """``(self - others) / self``; ``None`` when ``self`` is zero."""
    if self_score == 0:
        return None
    return (self_score - others) / self_score


@dataclass
class BiasReport:
    self_score: float
    others: float
    pd: Optional[float]
    c2st_acc: Optional[float] = None
    per_domain: dict = field(default_factory=dict)
    per_domain_bias: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["self"] = d.pop("self_score")
        d["per_domain"] = {str(k): v for k, v in self.per_domain.items()}
        d["per_domain_bias"] = {str(k): v for k, v in self.per_domain_bias.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BiasReport":
        return cls(d["self"], d["others"], d["pd"], d.get("c2st_acc"), dict(d.get("per_domain", {})),
                   dict(d.get("per_domain_bias", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cross_dataset_report(per_domain: dict, internal: Sequence, external: Sequence,
                         c2st_acc: Optional[float] = None,
                         per_domain_bias: Optional[dict] = None) -> BiasReport:
    internal, external = list(internal), list(external)
    if not external:
        raise ValueError("need at least one external domain")
    if not internal:
        raise ValueError("need at least one internal domain")
    if set(internal) & set(external):
        raise ValueError(f"internal and external sets overlap: {sorted(set(internal) & set(external), key=str)}")
    for d in internal + external:
        score = per_domain[d]
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score for domain {d!r} outside [0, 1]: {score}")
    # fixed summation order keeps the result independent of how the caller lists domains
    self_score = math.fsum(per_domain[d] for d in internal) / len(internal)
    others = math.fsum(per_domain[d] for d in external) / len(external)
    pd = performance_drop(self_score, others)
    if pd is None:
        warnings.warn("internal score is zero; performance drop is undefined", RuntimeWarning, stacklevel=2)
    return BiasReport(self_score, others, pd, c2st_acc, dict(per_domain), dict(per_domain_bias or {}))


# --------------------------------------------------------------------------
# classifier two-sample test


@dataclass
class C2stConfig:
    probe: str = "linear"  # or "mlp" (one hidden layer)
    test_fraction: float = 0.3
    seeds: tuple = (0, 1, 2, 3, 4)
    hidden: int = 32
    alpha: float = 0.05

    def __post_init__(self):
        if self.probe not in ("linear", "mlp"):
            raise ValueError(f"unknown probe {self.probe!r}")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass
class C2stResult:
    accuracy: float
    per_seed: list
    n_test: int
    chance: float
    p_value: float
    different: bool


def c2st_dataset(samples: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Union of the samples with the source index of each row as its label."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    for k, s in enumerate(samples):
        if s.ndim != 2 or s.shape[0] == 0:
            raise ValueError(f"sample {k} must be a non-empty matrix, got shape {s.shape}")
    x = np.concatenate([np.asarray(s, dtype=np.float64) for s in samples])
    y = np.concatenate([np.full(s.shape[0], k) for k, s in enumerate(samples)])
    return x, y


def _stratified_split(y: np.ndarray, test_fraction: float, rng: np.random.Generator):
    train, test = [], []
    for k in np.unique(y):
        rows = rng.permutation(np.flatnonzero(y == k))
        n_test = int(round(test_fraction * rows.size))
        if n_test == 0 or n_test == rows.size:
            raise ValueError(f"degenerate split: class {k} has {rows.size} rows, "
                             f"{n_test} would go to the test set")
        test.append(rows[:n_test])
        train.append(rows[n_test:])
    return np.concatenate(train), np.concatenate(test)


def _make_probe(config: C2stConfig, seed: int):
    from sklearn.linear_model import LogisticRegression
    from sklearn.neural_network import MLPClassifier

    if config.probe == "linear":
        return LogisticRegression(max_iter=2000)
    return MLPClassifier(hidden_layer_sizes=(config.hidden,), max_iter=500, random_state=seed)


def c2st_multi(samples: Sequence[np.ndarray], config: Optional[C2stConfig] = None) -> C2stResult:
    """Train a probe to tell the samples apart; report held-out accuracy averaged over seeds."""
    from sklearn.preprocessing import StandardScaler

    config = config or C2stConfig()
    x, y = c2st_dataset(samples)
    accs, n_test, correct = [], 0, 0
    for seed in config.seeds:
        tr, te = _stratified_split(y, config.test_fraction, np.random.default_rng(seed))
        scaler = StandardScaler().fit(x[tr])
        probe = _make_probe(config, seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            probe.fit(scaler.transform(x[tr]), y[tr])
        pred = probe.predict(scaler.transform(x[te]))
        hits = int(np.sum(pred == y[te]))
        accs.append(hits / te.size)
        n_test, correct = te.size, hits
    chance = float(np.max(np.bincount(y)) / y.size)
    # the verdict uses the last seed's split: one binomial draw per held-out set
    p_value = float(stats.binomtest(correct, n_test, chance, alternative="greater").pvalue)
    return C2stResult(float(np.mean(accs)), accs, n_test, chance, p_value, p_value < config.alpha)


def c2st(emb_a: np.ndarray, emb_b: np.ndarray, config: Optional[C2stConfig] = None) -> C2stResult:
    return c2st_multi([emb_a, emb_b], config)


# --------------------------------------------------------------------------
# embedding export


def top2_pca(z: np.ndarray, tol: float = 1e-8, max_iter: int = 10000, seed: int = 0):
    """Top two principal directions by power iteration with deflation.

    Returns ``(projection, components, variances)`` where ``projection`` is
    the centred data projected on the components.
    """
    z = np.asarray(z, dtype=np.float64)
    centred = z - z.mean(axis=0)
    cov = centred.T @ centred / max(z.shape[0] - 1, 1)
    n_comp = min(2, z.shape[1])
    rng = np.random.default_rng(seed)
    comps, variances = [], []
    c = cov.copy()
    for _ in range(n_comp):
        v = rng.normal(size=c.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = c @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
                v = w
                break
            v = w
        lam = float(v @ c @ v)
        comps.append(v)
        variances.append(lam)
        c = c - lam * np.outer(v, v)
    comps = np.array(comps)
    return centred @ comps.T, comps, np.array(variances)


def export_embeddings(model, datasets, path, split: str = "test") -> tuple[Path, Path]:
    """Write ``(domain, label, z_1..z_k)`` rows and a 2-D PCA projection as CSV."""
    from .trainer import embed

    path = Path(path)
    rows, zs = [], []
    for ds in datasets:
        x, y = ds.split(split)
        z = embed(model.state, x)
        zs.append(z)
        labels = y if y.ndim == 1 else [";".join(str(int(v)) for v in r) for r in y]
        rows += [(ds.domain_id, lab) for lab in labels]
    z_all = np.concatenate(zs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label"] + [f"z_{k + 1}" for k in range(z_all.shape[1])])
        for (dom, lab), z in zip(rows, z_all):
            w.writerow([dom, lab] + [repr(float(v)) for v in z])
    proj, _, _ = top2_pca(z_all)
    proj_path = path.with_name(path.stem + "_pca.csv")
    with open(proj_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label", "pc_1", "pc_2"][: 2 + proj.shape[1]])
        for (dom, lab), p in zip(rows, proj):
            w.writerow([dom, lab] + [repr(float(v)) for v in p])
    return path, proj_path
