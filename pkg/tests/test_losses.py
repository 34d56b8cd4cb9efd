import math

import numpy as np
import pytest

from debias_dg.autodiff import ShapeError, Tape, Tensor
from debias_dg.heads import BiasHeadBank
from debias_dg.losses import (LossWeights, bias_reg_objective, bias_reg_terms, domain_sample_weights,
                              one_hot, svm_objective, task_loss)


def _lse(row):
    m = max(row)
    return m + math.log(sum(math.exp(v - m) for v in row))


def brute_ce(logits, y):
    total = 0.0
    for row, t in zip(logits.tolist(), y.tolist()):
        lse = _lse(row)
        total += -sum(tk * (v - lse) for v, tk in zip(row, t))
    return total / len(logits)


def brute_bce(logits, y):
    total = 0.0
    for row, t in zip(logits.tolist(), y.tolist()):
        for v, tk in zip(row, t):
            p = 1.0 / (1.0 + math.exp(-v))
            total -= tk * math.log(p) + (1 - tk) * math.log(1 - p)
    return total / len(logits)


def brute_logits(w, z):
    out = []
    for row in z.tolist():
        r = row + [1.0]
        out.append([sum(r[k] * w[k, c] for k in range(len(r))) for c in range(w.shape[1])])
    return np.array(out)


def random_bank(rng, emb=3, classes=2, domains=2):
    bank = BiasHeadBank.init(emb, classes, domains, rng)
    bank.w_vw.data = rng.normal(size=bank.w_vw.shape)
    for a, d in zip(bank.alphas, bank.deltas):
        a.data = 1 + 0.3 * rng.normal(size=a.shape)
        d.data = 0.3 * rng.normal(size=d.shape)
    return bank


# ---- task loss

def test_uniform_binary_prediction_costs_ln2():
    for label in (0, 1):
        loss = task_loss(Tensor(np.zeros((1, 2))), one_hot([label], 2)).item()
        assert abs(loss - math.log(2)) < 1e-15


def test_bce_at_half_is_five_ln2():
    y = np.array([[1, 0, 1, 1, 0]], dtype=float)
    loss = task_loss(Tensor(np.zeros((1, 5))), y, "multilabel-bce").item()
    assert abs(loss - 5 * math.log(2)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_task_loss_matches_scalar_recomputation(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 4)) * 2
    y = one_hot(rng.integers(4, size=6), 4)
    assert abs(task_loss(Tensor(logits), y).item() - brute_ce(logits, y)) <= 1e-12
    yb = (rng.random((6, 4)) < 0.5).astype(float)
    assert abs(task_loss(Tensor(logits), yb, "multilabel-bce").item() - brute_bce(logits, yb)) <= 1e-12


def test_task_loss_is_nonnegative_and_finite_for_huge_logits():
    logits = Tensor(np.array([[1e4, -1e4], [-1e4, 1e4]]))
    loss = task_loss(logits, one_hot([1, 1], 2)).item()
    assert np.isfinite(loss) and loss >= 0


def test_labels_outside_domain_rejected():
    with pytest.raises(ValueError):
        one_hot([0, 2], 2)
    with pytest.raises(ValueError):
        one_hot([-1], 2)
    with pytest.raises(ValueError):
        task_loss(Tensor(np.zeros((1, 2))), [[0.5, 0.6]])
    with pytest.raises(ValueError):
        task_loss(Tensor(np.zeros((1, 2))), [[2.0, 0.0]], "multilabel-bce")
    with pytest.raises(ShapeError):
        task_loss(Tensor(np.zeros((2, 3))), one_hot([0, 1], 2))


def test_domain_sample_weights():
    d = np.array([0, 0, 0, 1])
    w = domain_sample_weights(d, "equal")
    assert np.allclose(w, [1 / 6, 1 / 6, 1 / 6, 1 / 2])
    assert np.isclose(w.sum(), 1.0)
    assert np.allclose(domain_sample_weights(d, "proportional"), 0.25)
    assert np.array_equal(domain_sample_weights(d, "none"), np.ones(4))
    with pytest.raises(ValueError):
        domain_sample_weights(d, "bogus")


# ---- svm objective

def svm_bank(rng, emb, domains):
    bank = BiasHeadBank.init(emb, 1, domains, rng)
    bank.w_vw.data = rng.normal(size=bank.w_vw.shape)
    for d in bank.deltas:
        d.data = rng.normal(size=d.shape)
    return bank


def brute_svm(bank, zs, ys, w):
    w_vw = bank.w_vw.data[:, 0]
    total = 0.5 * float(np.sum(w_vw ** 2))
    for d in bank.deltas:
        total += 0.5 * w.lam * float(np.sum(d.data ** 2))
    for i, (z, y) in enumerate(zip(zs, ys)):
        wi = w_vw + bank.deltas[i].data[:, 0]
        for row, label in zip(z.tolist(), y):
            r = row + [1.0]
            m_vw = label * sum(a * b for a, b in zip(r, w_vw))
            m_i = label * sum(a * b for a, b in zip(r, wi))
            total += w.c1 * max(1 - m_vw, 0.0) + w.c2 * max(1 - m_i, 0.0)
    return total


def test_svm_all_zero_weights():
    bank = BiasHeadBank.init(3, 1, 2, np.random.default_rng(0))
    bank.w_vw.data[:] = 0
    for d in bank.deltas:
        d.data[:] = 0
    w = LossWeights(c1=0.7, c2=1.3)
    zs = [Tensor(np.ones((3, 3))), Tensor(np.ones((5, 3)))]
    ys = [np.ones(3), -np.ones(5)]
    assert abs(svm_objective(bank, zs, ys, w).item() - 2.0 * 8) < 1e-12


def test_svm_satisfied_margin_contributes_nothing():
    bank = BiasHeadBank.init(1, 1, 1, np.random.default_rng(0))
    bank.w_vw.data = np.array([[2.0], [0.0]])
    bank.deltas[0].data[:] = 0
    w = LossWeights(c1=1.0, c2=0.0, lam=0.0)
    val = svm_objective(bank, [Tensor([[1.0]])], [np.array([1.0])], w).item()
    assert val == 0.5 * 4.0


@pytest.mark.parametrize("seed", range(5))
def test_svm_matches_term_by_term(seed):
    rng = np.random.default_rng(seed)
    bank = svm_bank(rng, 3, 2)
    zs = [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]
    ys = [rng.choice([-1.0, 1.0], size=4) for _ in zs]
    w = LossWeights(c1=0.8, c2=1.7, lam=0.4)
    got = svm_objective(bank, [Tensor(z) for z in zs], ys, w).item()
    assert abs(got - brute_svm(bank, zs, ys, w)) <= 1e-10


def test_svm_rejects_bad_labels_and_multi_output_heads():
    rng = np.random.default_rng(0)
    bank = svm_bank(rng, 2, 1)
    with pytest.raises(ValueError):
        svm_objective(bank, [Tensor(np.ones((2, 2)))], [np.array([1.0, 0.0])], LossWeights())
    with pytest.raises(ShapeError):
        svm_objective(BiasHeadBank.init(2, 2, 1, rng), [Tensor(np.ones((2, 2)))], [np.ones(2)],
                      LossWeights())


def test_svm_subgradient_is_zero_at_kink():
    bank = BiasHeadBank.init(1, 1, 1, np.random.default_rng(0))
    bank.w_vw.data = np.array([[1.0], [0.0]])
    bank.deltas[0].data[:] = 0
    w = LossWeights(c1=1.0, c2=0.0, lam=0.0)
    with Tape() as tape:
        (g,) = tape.backward(svm_objective(bank, [Tensor([[1.0]])], [np.array([1.0])], w), [bank.w_vw])
    # only the 0.5*|w|^2 term contributes: margin is exactly 1
    assert np.array_equal(g, bank.w_vw.data)


# ---- bias-regularized cross-entropy

def brute_bias_reg(bank, zs, ys, w, weighting="equal"):
    total = w.vw_reg * float(np.sum(bank.w_vw.data ** 2))
    for a, d in zip(bank.alphas, bank.deltas):
        total += w.lam * float(np.sum(d.data ** 2)) + w.gamma * float(np.sum((a.data - 1) ** 2))
    n_present = len(zs)
    for i, (z, y) in enumerate(zip(zs, ys)):
        scale = 1.0 / n_present if weighting == "equal" else len(z)
        wi = bank.alphas[i].data * bank.w_vw.data + bank.deltas[i].data
        total += scale * (w.c1 * brute_ce(brute_logits(bank.w_vw.data, z), y)
                          + w.c2 * brute_ce(brute_logits(wi, z), y))
    return total


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("weighting", ["equal", "none"])
@pytest.mark.parametrize("vw_reg", [1.0, 0.25])
def test_bias_reg_matches_term_by_term(seed, weighting, vw_reg):
    rng = np.random.default_rng(seed)
    bank = random_bank(rng, 3, 3, 2)
    zs = [rng.normal(size=(4, 3)), rng.normal(size=(5, 3))]
    ys = [one_hot(rng.integers(3, size=len(z)), 3) for z in zs]
    w = LossWeights(c1=0.9, c2=1.4, lam=0.3, gamma=0.2, vw_reg=vw_reg)
    got = bias_reg_objective(bank, [Tensor(z) for z in zs], ys, w, weighting=weighting).item()
    assert abs(got - brute_bias_reg(bank, zs, ys, w, weighting)) <= 1e-10


def test_bias_reg_reduces_to_regularized_erm():
    rng = np.random.default_rng(7)
    bank = BiasHeadBank.init(3, 2, 2, rng)
    bank.w_vw.data = rng.normal(size=bank.w_vw.shape)
    for d in bank.deltas:
        d.data[:] = 0
    z = [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]
    y = [one_hot(rng.integers(2, size=4), 2) for _ in z]
    w = LossWeights(c1=1.5, c2=0.0, lam=0.0, gamma=0.0)
    got = bias_reg_objective(bank, [Tensor(a) for a in z], y, w, weighting="proportional").item()
    pooled = task_loss(bank.vw_logits(np.vstack(z)), np.vstack(y)).item()
    assert abs(got - (np.sum(bank.w_vw.data ** 2) + 1.5 * pooled)) <= 1e-12


def test_bias_reg_all_zero_parameters():
    bank = BiasHeadBank.init(3, 4, 2, np.random.default_rng(0))
    for p in bank.parameters():
        p.data[:] = 0
    w = LossWeights(c1=1.0, c2=2.0, lam=5.0, gamma=0.0)
    zs = [Tensor(np.ones((3, 3))), Tensor(np.ones((2, 3)))]
    ys = [one_hot([0, 1, 2], 4), one_hot([3, 3], 4)]
    assert abs(bias_reg_objective(bank, zs, ys, w).item() - 3.0 * math.log(4)) <= 1e-12


def test_delta_gradient_contains_exact_penalty_term():
    rng = np.random.default_rng(8)
    bank = random_bank(rng)
    zs = [Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))]
    ys = [one_hot(rng.integers(2, size=4), 2) for _ in zs]
    grads = []
    for lam in (0.0, 0.7):
        with Tape() as tape:
            obj = bias_reg_objective(bank, zs, ys, LossWeights(lam=lam))
            grads.append(tape.backward(obj, [bank.deltas[1]])[0])
    assert np.max(np.abs(grads[1] - grads[0] - 2 * 0.7 * bank.deltas[1].data)) <= 1e-12


def test_components_sum_to_objective():
    rng = np.random.default_rng(9)
    bank = random_bank(rng)
    zs = [Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(6, 3)))]
    ys = [one_hot(rng.integers(2, size=len(z.data)), 2) for z in zs]
    w = LossWeights(c1=1.1, c2=0.6, lam=0.2, gamma=0.3)
    terms = bias_reg_terms(bank, zs, ys, w)
    assert set(terms) == {"R_wvw", "R_delta", "R_alpha", "L_vw", "L_bias"}
    total = sum(t.item() for t in terms.values())
    assert abs(total - bias_reg_objective(bank, zs, ys, w).item()) <= 1e-12


def test_empty_domain_is_skipped_but_all_empty_rejected():
    rng = np.random.default_rng(10)
    bank = random_bank(rng)
    z = Tensor(rng.normal(size=(4, 3)))
    y = one_hot([0, 1, 1, 0], 2)
    val = bias_reg_objective(bank, [z, None], [y, None], LossWeights())
    assert np.isfinite(val.item())
    with pytest.raises(ValueError):
        bias_reg_objective(bank, [None, None], [None, None], LossWeights())


def test_negative_weights_rejected():
    for kw in ({"lam": -0.1}, {"vw_reg": -1.0}):
        with pytest.raises(ValueError):
            LossWeights(**kw)


def test_cross_entropy_gradient_wrt_logits():
    rng = np.random.default_rng(11)
    logits = Tensor(rng.normal(size=(5, 3)))
    y = one_hot(rng.integers(3, size=5), 3)
    with Tape() as tape:
        (g,) = tape.backward(task_loss(logits, y), [logits])
    p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.max(np.abs(g - (p - y) / 5)) <= 1e-14
