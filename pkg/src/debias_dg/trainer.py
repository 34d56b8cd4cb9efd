"""Training strategies: MCT with bias-regularized heads and the baselines.

Every strategy shares one model layout (feature extractor, head bank, linear
domain classifier) and one seeding scheme, so runs with the same seed draw the
same initial parameters and the same mini-batches.  That makes trajectory
comparisons between strategies meaningful.

The domain classifier is trained in every strategy.  Except for DANN it only
ever sees detached embeddings, so it never moves the feature extractor.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .heads import BiasHeadBank, DomainClassifier, head_logits
from .losses import (LossWeights, domain_sample_weights, one_hot, per_sample_task_loss,
                     svm_objective, task_loss)
from .network import LayeredNet, init_params, resolve_tap_set

logger = logging.getLogger(__name__)

STRATEGIES = ("mct", "erm", "mixup", "crossgrad", "dann", "e2e-svm", "e2e-ce")
BIAS_STRATEGIES = ("mct", "crossgrad", "e2e-ce", "e2e-svm")
COMPONENTS = ("L_vw", "L_bias", "L_aug", "R_wvw", "R_delta", "R_alpha", "L_domain")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass
class TrainConfig:
    strategy: str = "mct"
    epsilon: float = 1.0
    eta: float = 0.05
    steps: int = 5000
    batch_size: int = 64
    loss_weights: LossWeights = field(default_factory=LossWeights)
    tap_set: Union[str, list] = "default"
    seed: int = 0
    mixup_alpha: float = 0.4
    dann_weight: float = 1.0
    hidden: tuple = (64, 64, 32)
    task_mode: str = "softmax-ce"
    domain_weighting: str = "equal"
    domain_loss_weight: float = 1.0
    # L2 on w_vw for the strategies without bias heads (erm, mixup, dann)
    vw_l2: float = 0.0
    freeze_bias_heads: bool = False
    alpha_on_intercept: bool = True
    # "none" or "rms": scale epsilon by the tap's activation RMS relative to the input RMS
    epsilon_scaling: str = "none"
    # "sum" perturbs along per-sample gradients; "mean" along the batch-mean gradient
    perturb_reduction: str = "sum"
    # keep the augmented loss differentiable through layers before the tap
    augment_prefix_grad: bool = True
    eval_every: int = 0
    check_stop_gradient: bool = False

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dann_weight < 0:
            raise ValueError("dann_weight must be >= 0")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        if self.epsilon_scaling not in ("none", "rms"):
            raise ValueError(f"unknown epsilon_scaling {self.epsilon_scaling!r}")
        if self.perturb_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown perturb_reduction {self.perturb_reduction!r}")
        if not self.hidden:
            raise ValueError("hidden must list at least the embedding size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        if not isinstance(d["tap_set"], str):
            d["tap_set"] = list(d["tap_set"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DomainBatch:
    """Rows ``X`` with target matrix ``Y`` and domain positions ``D`` in ``0..N-1``."""

    X: np.ndarray
    Y: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        n = self.X.shape[0]
        if self.Y.shape[0] != n or self.D.shape[0] != n:
            raise ValueError(f"batch row counts differ: X {n}, Y {self.Y.shape[0]}, D {self.D.shape[0]}")


@dataclass
class AugmentedPair:
    q_bar: Tensor
    q_tilde: Tensor
    tap: str


@dataclass
class ModelState:
    net: LayeredNet
    bank: BiasHeadBank
    dc: DomainClassifier
    step: int = 0

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.net.layers:
            out[f"{layer.name}.weight"] = layer.weight
            out[f"{layer.name}.bias"] = layer.bias
        out["w_vw"] = self.bank.w_vw
        for i, (a, d) in enumerate(zip(self.bank.alphas, self.bank.deltas)):
            out[f"alpha{i}"] = a
            out[f"delta{i}"] = d
        out["phi"] = self.dc.phi
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def copy(self) -> "ModelState":
        return ModelState(self.net.copy(), self.bank.copy(), self.dc.copy(), self.step)


@dataclass
class TrainedModel:
    state: ModelState
    config: TrainConfig
    domain_ids: list
    n_classes: int
    history: list = field(default_factory=list)

    @property
    def label_dim(self) -> int:
        return self.state.bank.label_dim


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for init, batches, tap choice and augmentation noise."""
    ss = np.random.SeedSequence(seed)
    names = ("init", "batch", "tap", "aug")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def label_dim_for(strategy: str, n_classes: int, task_mode: str) -> int:
    if strategy == "e2e-svm":
        if task_mode != "softmax-ce" or n_classes != 2:
            raise ValueError("e2e-svm supports binary single-label tasks only")
        return 1
    return n_classes


def init_state(config: TrainConfig, input_dim: int, n_classes: int, n_domains: int,
               rng: Optional[np.random.Generator] = None) -> ModelState:
    if rng is None:
        rng = rng_streams(config.seed)["init"]
    net = init_params([input_dim, *config.hidden], rng=rng)
    label_dim = label_dim_for(config.strategy, n_classes, config.task_mode)
    bank = BiasHeadBank.init(net.embedding_dim, label_dim, n_domains, rng, config.alpha_on_intercept)
    dc = DomainClassifier.init(net.embedding_dim, n_domains, rng)
    return ModelState(net, bank, dc)


# --------------------------------------------------------------------------
# pieces shared by the steps


def _sum_terms(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _domain_ce(dc: DomainClassifier, z_detached: Tensor, d: np.ndarray) -> Tensor:
    return task_loss(dc.logits(z_detached), one_hot(d, dc.n_domains), "softmax-ce")


def _apply_sgd(params: Sequence[Tensor], grads: Sequence[np.ndarray], eta: float) -> None:
    for p, g in zip(params, grads):
        p.data = p.data - eta * g


def _finish(state: ModelState, tape: Tape, comps: dict, params: list, config: TrainConfig,
            extra: Optional[dict] = None) -> dict:
    total = _sum_terms(list(comps.values()))
    if not math.isfinite(total.item()):
        raise TrainingDiverged(state.step, "total objective")
    metrics = {name: comps[name].item() if name in comps else 0.0 for name in COMPONENTS}
    metrics["total"] = total.item()
    if config.check_stop_gradient and "L_domain" in comps and config.strategy != "dann":
        grads = tape.backward(comps["L_domain"], state.net.parameters())
        metrics["domain_grad_theta"] = max(float(np.max(np.abs(g))) for g in grads)
    grads = tape.backward(total, params)
    _apply_sgd(params, grads, config.eta)
    state.step += 1
    if extra:
        metrics.update(extra)
    return metrics


def _bias_head_params(state: ModelState, config: TrainConfig) -> list[Tensor]:
    if config.freeze_bias_heads:
        return []
    return state.bank.alphas + state.bank.deltas


def _perturb_scale(q: Tensor, x: np.ndarray, config: TrainConfig) -> float:
    if config.epsilon_scaling == "none":
        return config.epsilon
    rms_x = float(np.sqrt(np.mean(x * x))) or 1.0
    return config.epsilon * float(np.sqrt(np.mean(q.data * q.data))) / rms_x


def mct_perturb(tape: Tape, l_y: Tensor, l_d: Tensor, q: Tensor, epsilon: float,
                tap: str = "", z: Optional[Tensor] = None, z_detached: Optional[Tensor] = None,
                keep_prefix: bool = False) -> AugmentedPair:
    """Shift the activation ``q`` along the domain-loss and label-loss gradients.

    ``l_d`` may be computed from a detached copy ``z_detached`` of the
    embedding ``z`` (the stop-gradient layout used in training); its gradient
    is then carried back to ``q`` through the recorded forward pass as data.
    With ``keep_prefix`` the domain-perturbed activation stays connected to
    ``q`` (only the shift is constant), so layers before the tap still receive
    gradients from losses on it.
    """
    if z_detached is not None:
        if z is None:
            raise ValueError("z is required when l_d is computed on a detached embedding")
        g_z = tape.grad_wrt_activation(l_d, z_detached)
        g_d = tape.grad_wrt_activation(z, q, cotangent=g_z.data)
    else:
        g_d = tape.grad_wrt_activation(l_d, q)
    g_y = tape.grad_wrt_activation(l_y, q)
    shift = epsilon * g_d.data
    q_bar = ad.add(q, shift) if keep_prefix else Tensor(q.data + shift)
    q_tilde = Tensor(q.data + epsilon * g_y.data)
    return AugmentedPair(q_bar, q_tilde, tap)


def _choose_tap(net: LayeredNet, config: TrainConfig, rng: Optional[np.random.Generator],
                tap: Optional[str]) -> str:
    if tap is not None:
        return tap
    taps = resolve_tap_set(net, config.tap_set)
    if len(taps) == 1:
        return taps[0]
    if rng is None:
        raise ValueError("a tap generator is required when the tap set has several members")
    return taps[int(rng.integers(len(taps)))]


# --------------------------------------------------------------------------
# strategies


def _bias_reg_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
                   augment: bool, rng: Optional[np.random.Generator] = None,
                   tap: Optional[str] = None) -> dict:
    net, bank, dc = state.net, state.bank, state.dc
    lw = config.loss_weights
    mode = config.task_mode
    sw = domain_sample_weights(batch.D, config.domain_weighting)
    skipped = []
    extra = {}
    with Tape() as tape:
        x = Tensor(batch.X)
        z, taps = net.forward_with_taps(x)
        per_vw = per_sample_task_loss(bank.vw_logits(z), batch.Y, mode)
        comps = {"L_vw": ad.scale(ad.sum(ad.mul(per_vw, sw)), lw.c1)}
        bias_terms = []
        for i in range(bank.n_domains):
            rows = np.flatnonzero(batch.D == i)
            if rows.size == 0:
                skipped.append(i)
                continue
            zi = ad.row_select(z, rows)
            bias_terms.append(task_loss(bank.bias_logits(i, zi), batch.Y[rows], mode, sw[rows]))
        if skipped:
            logger.debug("step %d: no samples for domains %s; their bias terms are skipped", state.step, skipped)
        if bias_terms:
            comps["L_bias"] = ad.scale(_sum_terms(bias_terms), lw.c2)
        comps["R_wvw"] = ad.scale(ad.sq_norm(bank.w_vw), lw.vw_reg)
        comps["R_delta"] = _sum_terms([ad.scale(ad.sq_norm(d), lw.lam) for d in bank.deltas])
        comps["R_alpha"] = _sum_terms([ad.scale(ad.sq_norm(ad.sub(a, 1.0)), lw.gamma) for a in bank.alphas])

        z_det = ad.detach(z)
        d_onehot = one_hot(batch.D, dc.n_domains)
        per_d = per_sample_task_loss(dc.logits(z_det), d_onehot, "softmax-ce")
        domain_terms = [ad.mean(per_d)]
        if augment:
            name = _choose_tap(net, config, rng, tap)
            q = taps[name]
            if config.perturb_reduction == "sum":
                l_y, l_d = ad.sum(per_vw), ad.sum(per_d)
            else:
                l_y, l_d = ad.mean(per_vw), ad.mean(per_d)
            eps = _perturb_scale(q, batch.X, config)
            pair = mct_perturb(tape, l_y, l_d, q, eps, name, z=z, z_detached=z_det,
                               keep_prefix=config.augment_prefix_grad)
            z_bar = net.forward_from_tap(name, pair.q_bar)
            comps["L_aug"] = ad.scale(task_loss(bank.vw_logits(z_bar), batch.Y, mode, sw), lw.c3)
            z_tilde = ad.detach(net.forward_from_tap(name, pair.q_tilde))
            domain_terms.append(_domain_ce(dc, z_tilde, batch.D))
            extra["tap"] = name
        comps["L_domain"] = ad.scale(_sum_terms(domain_terms), config.domain_loss_weight)

        params = net.parameters() + [bank.w_vw] + _bias_head_params(state, config) + [dc.phi]
        return _finish(state, tape, comps, params, config, extra)


def mct_train_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
                   rng: Optional[np.random.Generator] = None, tap: Optional[str] = None) -> dict:
    """One update of multi-layer cross-gradient training with bias-regularized heads.

    A tap is drawn uniformly from the configured tap set (unless ``tap`` is
    given).  The domain-perturbed embedding trains only ``theta`` and ``w_vw``
    through the C3 term; the label-perturbed embedding trains only ``phi``.
    """
    return _bias_reg_step(state, batch, config, augment=True, rng=rng, tap=tap)


def crossgrad_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
                   rng: Optional[np.random.Generator] = None) -> dict:
    """MCT restricted to the input tap."""
    return _bias_reg_step(state, batch, config, augment=True, rng=rng, tap="input")


def e2e_ce_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
                rng: Optional[np.random.Generator] = None) -> dict:
    return _bias_reg_step(state, batch, config, augment=False)


def e2e_svm_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
                 rng: Optional[np.random.Generator] = None) -> dict:
    """End-to-end soft-margin objective; alpha stays at 1."""
    net, bank, dc = state.net, state.bank, state.dc
    y_pm = np.where(batch.Y[:, 1] > 0.5, 1.0, -1.0)
    with Tape() as tape:
        z = net.forward(Tensor(batch.X))
        zs, ys = [], []
        for i in range(bank.n_domains):
            rows = np.flatnonzero(batch.D == i)
            zs.append(ad.row_select(z, rows) if rows.size else None)
            ys.append(y_pm[rows])
        comps = {"L_vw": svm_objective(bank, zs, ys, config.loss_weights, config.domain_weighting)}
        z_det = ad.detach(z)
        comps["L_domain"] = ad.scale(_domain_ce(dc, z_det, batch.D), config.domain_loss_weight)
        deltas = [] if config.freeze_bias_heads else list(bank.deltas)
        params = net.parameters() + [bank.w_vw] + deltas + [dc.phi]
        return _finish(state, tape, comps, params, config)


def erm_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
             rng: Optional[np.random.Generator] = None) -> dict:
    net, bank, dc = state.net, state.bank, state.dc
    sw = domain_sample_weights(batch.D, config.domain_weighting)
    with Tape() as tape:
        z = net.forward(Tensor(batch.X))
        comps = {"L_vw": task_loss(bank.vw_logits(z), batch.Y, config.task_mode, sw),
                 "R_wvw": ad.scale(ad.sq_norm(bank.w_vw), config.vw_l2)}
        comps["L_domain"] = ad.scale(_domain_ce(dc, ad.detach(z), batch.D), config.domain_loss_weight)
        params = net.parameters() + [bank.w_vw, dc.phi]
        return _finish(state, tape, comps, params, config)


def dann_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
              rng: Optional[np.random.Generator] = None) -> dict:
    """Task loss plus a domain loss whose gradient is reversed before the extractor."""
    net, bank, dc = state.net, state.bank, state.dc
    sw = domain_sample_weights(batch.D, config.domain_weighting)
    with Tape() as tape:
        z = net.forward(Tensor(batch.X))
        comps = {"L_vw": task_loss(bank.vw_logits(z), batch.Y, config.task_mode, sw),
                 "R_wvw": ad.scale(ad.sq_norm(bank.w_vw), config.vw_l2)}
        reversed_z = ad.grad_reverse(z, config.dann_weight)
        comps["L_domain"] = ad.scale(_domain_ce(dc, reversed_z, batch.D), config.domain_loss_weight)
        params = net.parameters() + [bank.w_vw, dc.phi]
        return _finish(state, tape, comps, params, config)


def sample_partners(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each row, a random partner row from a different domain (any row if only one domain)."""
    d = np.asarray(d)
    partners = np.empty(d.shape[0], dtype=np.intp)
    for value in np.unique(d):
        rows = np.flatnonzero(d == value)
        others = np.flatnonzero(d != value)
        if others.size == 0:
            others = np.arange(d.shape[0])
        partners[rows] = others[rng.integers(others.size, size=rows.size)]
    return partners


def mix_pairs(xa, ya, xb, yb, beta):
    """``beta * a + (1 - beta) * b`` for rows and targets; ``beta`` is a scalar or one value per row."""
    xa, ya, xb, yb = (np.asarray(v, dtype=np.float64) for v in (xa, ya, xb, yb))
    b = np.asarray(beta, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    return b * xa + (1.0 - b) * xb, b * ya + (1.0 - b) * yb


def mixup_step(state: ModelState, batch: DomainBatch, config: TrainConfig,
               rng: Optional[np.random.Generator] = None) -> dict:
    if batch.X.shape[0] < 2:
        raise ValueError("mixup needs at least two rows per batch")
    if rng is None:
        raise ValueError("mixup needs a generator")
    net, bank, dc = state.net, state.bank, state.dc
    partners = sample_partners(batch.D, rng)
    beta = rng.beta(config.mixup_alpha, config.mixup_alpha, size=batch.X.shape[0])
    x_mix, y_mix = mix_pairs(batch.X, batch.Y, batch.X[partners], batch.Y[partners], beta)
    with Tape() as tape:
        z = net.forward(Tensor(x_mix))
        comps = {"L_vw": task_loss(bank.vw_logits(z), y_mix, config.task_mode),
                 "R_wvw": ad.scale(ad.sq_norm(bank.w_vw), config.vw_l2)}
        z_orig = ad.detach(net.forward(Tensor(batch.X)))
        comps["L_domain"] = ad.scale(_domain_ce(dc, z_orig, batch.D), config.domain_loss_weight)
        params = net.parameters() + [bank.w_vw, dc.phi]
        return _finish(state, tape, comps, params, config, {"beta_mean": float(beta.mean())})


STEP_FUNCTIONS = {
    "mct": mct_train_step,
    "crossgrad": crossgrad_step,
    "e2e-ce": e2e_ce_step,
    "e2e-svm": e2e_svm_step,
    "erm": erm_step,
    "dann": dann_step,
    "mixup": mixup_step,
}


# --------------------------------------------------------------------------
# orchestration


def targets_for(labels: np.ndarray, n_classes: int, task_mode: str) -> np.ndarray:
    labels = np.asarray(labels)
    if task_mode == "softmax-ce":
        return one_hot(labels.reshape(-1), n_classes)
    return labels.astype(np.float64).reshape(labels.shape[0], -1)


class BatchSampler:
    """Stratified uniform-with-replacement sampling over training domains."""

    def __init__(self, xs: Sequence[np.ndarray], ys: Sequence[np.ndarray], batch_size: int,
                 rng: np.random.Generator):
        if any(x.shape[0] == 0 for x in xs):
            raise ValueError("every training domain needs at least one training row")
        self.xs, self.ys = list(xs), list(ys)
        self.batch_size = batch_size
        self.rng = rng

    def sample(self) -> DomainBatch:
        n_dom = len(self.xs)
        counts = np.full(n_dom, self.batch_size // n_dom)
        extra = self.batch_size - counts.sum()
        if extra:
            counts[self.rng.choice(n_dom, size=extra, replace=False)] += 1
        xs, ys, ds = [], [], []
        for i, k in enumerate(counts):
            if k == 0:
                continue
            rows = self.rng.integers(self.xs[i].shape[0], size=k)
            xs.append(self.xs[i][rows])
            ys.append(self.ys[i][rows])
            ds.append(np.full(k, i))
        return DomainBatch(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds))


def embed(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Embeddings as a plain array (no tape)."""
    return state.net.forward(Tensor(np.asarray(x, dtype=np.float64))).data


def score(model: TrainedModel, x: np.ndarray, y: np.ndarray, head: Optional[int] = None) -> float:
    """Accuracy (single-label) or macro AUC (multi-label) of one head on rows ``x``."""
    from .metrics import macro_auc

    logits = head_logits(model.state.bank, embed(model.state, x), head)
    y = np.asarray(y)
    if model.config.task_mode == "multilabel-bce":
        return macro_auc(logits, y.reshape(y.shape[0], -1))
    if logits.shape[1] == 1:
        pred = (logits[:, 0] > 0).astype(int)
    else:
        pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == y.reshape(-1)))


def validation_score(model: TrainedModel, datasets) -> float:
    scores = [score(model, *ds.split("val")) for ds in datasets if ds.split("val")[0].shape[0]]
    return float(np.mean(scores)) if scores else float("nan")


def train(config: TrainConfig, datasets, n_classes: Optional[int] = None) -> TrainedModel:
    """Run ``config.steps`` updates of ``config.strategy`` on the training splits of ``datasets``.

    Returns the trained model; its ``history`` holds one row of loss
    components per step plus validation scores every ``eval_every`` steps
    and at the final step.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("no training domains")
    if config.strategy in BIAS_STRATEGIES + ("dann", "mixup") and len(datasets) < 2:
        raise ValueError(f"strategy {config.strategy} needs at least 2 training domains")
    if n_classes is None:
        n_classes = max(ds.n_classes for ds in datasets)
    streams = rng_streams(config.seed)
    input_dim = datasets[0].X.shape[1]
    state = init_state(config, input_dim, n_classes, len(datasets), streams["init"])
    model = TrainedModel(state, config, [ds.domain_id for ds in datasets], n_classes)
    if config.strategy == "mct":
        resolve_tap_set(state.net, config.tap_set)
    xs, ys = [], []
    for ds in datasets:
        x, y = ds.split("train")
        xs.append(x)
        ys.append(targets_for(y, n_classes, config.task_mode))
    sampler = BatchSampler(xs, ys, config.batch_size, streams["batch"])
    step_fn = STEP_FUNCTIONS[config.strategy]
    step_rng = streams["aug"] if config.strategy == "mixup" else streams["tap"]
    for step in range(config.steps):
        batch = sampler.sample()
        try:
            metrics = step_fn(state, batch, config, step_rng)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        row = {"step": step}
        row.update(metrics)
        last = step == config.steps - 1
        if last or (config.eval_every and (step + 1) % config.eval_every == 0):
            row["val_score"] = validation_score(model, datasets)
        model.history.append(row)
    return model


HISTORY_COLUMNS = ("step",) + COMPONENTS + ("total", "val_score")


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row.get(c), float)
                             else row.get(c, "") for c in HISTORY_COLUMNS])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append({k: (float(v) if v != "" else None) for k, v in rec.items()})
        return rows
