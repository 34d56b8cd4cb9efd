"""Training objectives built from recorded primitives.

Per-domain sums follow a ``domain_weighting`` convention:

* ``"equal"``: average within each domain, then average over the domains present;
* ``"proportional"``: plain average over all samples;
* ``"none"``: raw double sum over domains and samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .heads import BiasHeadBank

TASK_MODES = ("softmax-ce", "multilabel-bce")
WEIGHTINGS = ("equal", "proportional", "none")


@dataclass
class LossWeights:
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    lam: float = 0.1
    gamma: float = 0.1
    # weight on ||w_vw||^2 in the cross-entropy objective
    vw_reg: float = 1.0

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "lam", "gamma", "vw_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes) \
            or not np.all(labels == np.round(labels)):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels.astype(np.intp)] = 1.0
    return out


def check_targets(y: np.ndarray, mode: str) -> None:
    if mode not in TASK_MODES:
        raise ValueError(f"unknown task mode {mode!r}; expected one of {TASK_MODES}")
    if y.ndim != 2:
        raise ShapeError(f"targets must be a matrix, got shape {y.shape}")
    if np.any(y < 0) or np.any(y > 1) or not np.isfinite(y).all():
        raise ValueError("targets must lie in [0, 1]")
    if mode == "softmax-ce" and not np.allclose(y.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("softmax-ce targets must be rows of a probability simplex (one-hot or mixed)")


def per_sample_task_loss(logits: Tensor, y, mode: str = "softmax-ce") -> Tensor:
    """Negative log-likelihood per row; bce sums over labels."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    check_targets(y, mode)
    if logits.shape != y.shape:
        raise ShapeError(f"task_loss: logits shape {logits.shape} != targets shape {y.shape}")
    if mode == "softmax-ce":
        logp = ad.log(ad.softmax(logits))
        return ad.scale(ad.sum(ad.mul(logp, y), axis=1), -1.0)
    s = ad.sigmoid(logits)
    ll = ad.add(ad.mul(ad.log(s), y), ad.mul(ad.log(ad.sub(1.0, s)), 1.0 - y))
    return ad.scale(ad.sum(ll, axis=1), -1.0)


def task_loss(logits: Tensor, y, mode: str = "softmax-ce", sample_weights=None) -> Tensor:
    """Batch-mean task loss, or a weighted sum when ``sample_weights`` is given."""
    per = per_sample_task_loss(logits, y, mode)
    if sample_weights is None:
        return ad.mean(per)
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != per.shape:
        raise ShapeError(f"task_loss: sample weights shape {w.shape} != batch shape {per.shape}")
    return ad.sum(ad.mul(per, w))


def domain_sample_weights(domains, weighting: str = "equal") -> np.ndarray:
    """Per-sample weights realising a domain weighting convention over one batch."""
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown domain weighting {weighting!r}; expected one of {WEIGHTINGS}")
    d = np.asarray(domains)
    n = d.shape[0]
    if weighting == "none":
        return np.ones(n)
    if weighting == "proportional":
        return np.full(n, 1.0 / n)
    values, inverse, counts = np.unique(d, return_inverse=True, return_counts=True)
    return 1.0 / (len(values) * counts[inverse])


def _domain_weights(zs: Sequence[Optional[Tensor]], weighting: str) -> list[Optional[np.ndarray]]:
    present = [z for z in zs if z is not None and z.shape[0] > 0]
    if not present:
        raise ValueError("no domain has any samples")
    total = sum(z.shape[0] for z in present)
    out = []
    for z in zs:
        if z is None or z.shape[0] == 0:
            out.append(None)
        elif weighting == "equal":
            out.append(np.full(z.shape[0], 1.0 / (len(present) * z.shape[0])))
        elif weighting == "proportional":
            out.append(np.full(z.shape[0], 1.0 / total))
        elif weighting == "none":
            out.append(np.ones(z.shape[0]))
        else:
            raise ValueError(f"unknown domain weighting {weighting!r}; expected one of {WEIGHTINGS}")
    return out


def _add_all(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def svm_objective(bank: BiasHeadBank, zs: Sequence[Optional[Tensor]], ys: Sequence,
                  weights: LossWeights, weighting: str = "none") -> Tensor:
    """Soft-margin undoing-bias objective with additive bias heads.

    ``0.5*|w_vw|^2 + lam/2 * sum_i |delta_i|^2
    + C1 * sum hinge(y * w_vw.z) + C2 * sum hinge(y * (w_vw + delta_i).z)``.
    Labels are +/-1 and the bank has a single output; ``alpha`` is ignored.
    """
    if bank.label_dim != 1:
        raise ShapeError(f"svm_objective needs a single-output head, got label_dim {bank.label_dim}")
    if len(zs) != bank.n_domains or len(ys) != bank.n_domains:
        raise ValueError(f"need one embedding batch and label vector per domain ({bank.n_domains})")
    terms = [ad.scale(ad.sq_norm(bank.w_vw), 0.5)]
    for delta in bank.deltas:
        terms.append(ad.scale(ad.sq_norm(delta), 0.5 * weights.lam))
    sample_w = _domain_weights(zs, weighting)
    for i, (z, y, w) in enumerate(zip(zs, ys, sample_w)):
        if w is None:
            continue
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("svm labels must be -1 or +1")
        if y.shape[0] != z.shape[0]:
            raise ShapeError(f"domain {i}: {z.shape[0]} embeddings but {y.shape[0]} labels")
        zz = ad.append_ones(z)
        margin_vw = ad.mul(ad.sum(ad.matmul(zz, bank.w_vw), axis=1), y)
        w_i = ad.add(bank.w_vw, bank.deltas[i])
        margin_i = ad.mul(ad.sum(ad.matmul(zz, w_i), axis=1), y)
        terms.append(ad.scale(ad.sum(ad.mul(ad.hinge(margin_vw), w)), weights.c1))
        terms.append(ad.scale(ad.sum(ad.mul(ad.hinge(margin_i), w)), weights.c2))
    return _add_all(terms)


def bias_reg_terms(bank: BiasHeadBank, zs: Sequence[Optional[Tensor]], ys: Sequence,
                   weights: LossWeights, mode: str = "softmax-ce",
                   weighting: str = "equal") -> dict[str, Tensor]:
    """Separately weighted components of the bias-regularized cross-entropy objective.

    Keys: ``R_wvw``, ``R_delta``, ``R_alpha``, ``L_vw`` (already times C1) and
    ``L_bias`` (already times C2).  Their sum is :func:`bias_reg_objective`.
    """
    if len(zs) != bank.n_domains or len(ys) != bank.n_domains:
        raise ValueError(f"need one embedding batch and target matrix per domain ({bank.n_domains})")
    r_delta = [ad.scale(ad.sq_norm(d), weights.lam) for d in bank.deltas]
    r_alpha = [ad.scale(ad.sq_norm(ad.sub(a, 1.0)), weights.gamma) for a in bank.alphas]
    sample_w = _domain_weights(zs, weighting)
    l_vw, l_bias = [], []
    for i, (z, y, w) in enumerate(zip(zs, ys, sample_w)):
        if w is None:
            continue
        l_vw.append(task_loss(bank.vw_logits(z), y, mode, w))
        l_bias.append(task_loss(bank.bias_logits(i, z), y, mode, w))
    return {
        "R_wvw": ad.scale(ad.sq_norm(bank.w_vw), weights.vw_reg),
        "R_delta": _add_all(r_delta),
        "R_alpha": _add_all(r_alpha),
        "L_vw": ad.scale(_add_all(l_vw), weights.c1),
        "L_bias": ad.scale(_add_all(l_bias), weights.c2),
    }


def bias_reg_objective(bank: BiasHeadBank, zs: Sequence[Optional[Tensor]], ys: Sequence,
                       weights: LossWeights, mode: str = "softmax-ce",
                       weighting: str = "equal") -> Tensor:
    """``vw_reg*|w_vw|^2 + sum_i(lam|delta_i|^2 + gamma|alpha_i - 1|^2)
    + C1 * L(w_vw z) + C2 * L(w_i z)`` over all domains."""
    return _add_all(list(bias_reg_terms(bank, zs, ys, weights, mode, weighting).values()))
