import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from debias_dg import autodiff as ad
from debias_dg.autodiff import (DisconnectedGradientWarning, NonFiniteError, ShapeError, Tape, TapeError,
                                Tensor)
from helpers import numeric_grad, rel_err


def grad_of(build, *values):
    """Gradients of ``build(*tensors)`` with respect to every argument."""
    ts = [Tensor(np.array(v, dtype=np.float64)) for v in values]
    with Tape() as tape:
        out = build(*ts)
        return out.item(), tape.backward(out, ts)


def check_fd(build, *values, tol=1e-4):
    _, grads = grad_of(build, *values)
    for k, v in enumerate(values):
        def f(x, k=k):
            args = [Tensor(np.array(a, dtype=np.float64)) for a in values]
            args[k] = Tensor(x)
            return build(*args).item()
        assert rel_err(grads[k], numeric_grad(f, np.array(v, dtype=np.float64))) < tol


# ---- forward examples

def test_relu_values():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_sq_norm_value():
    assert ad.sq_norm(Tensor([3.0, 4.0])).item() == 25.0


def test_softmax_uniform():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_is_stable_for_large_logits():
    s = ad.softmax(Tensor([[1000.0, 1000.0, -1000.0]])).data
    assert np.allclose(s, [[0.5, 0.5, 0.0]])


def test_sigmoid_extremes_stay_finite():
    s = ad.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    assert np.allclose(s, [0.0, 0.5, 1.0])


# ---- backward examples

def test_square_derivative():
    _, (g,) = grad_of(lambda x: ad.mul(x, x), 3.0)
    assert g == 6.0


def test_sq_norm_gradient():
    _, (g,) = grad_of(ad.sq_norm, [1.0, 2.0])
    assert np.array_equal(g, [2.0, 4.0])


def test_shared_subexpressions_accumulate():
    _, (g,) = grad_of(lambda x: ad.sum(ad.add(ad.mul(x, x), x)), [1.0, -2.0, 0.5])
    assert np.allclose(g, [3.0, -3.0, 2.0], atol=0, rtol=1e-15)


def test_unrelated_leaf_gets_zero_gradient():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0])
    with Tape() as tape:
        _ = ad.scale(b, 2.0)
        out = ad.sq_norm(a)
        ga, gb = tape.backward(out, [a, b])
    assert np.array_equal(gb, [0.0])
    assert np.array_equal(ga, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.scale(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y, [x])


def test_backward_rejects_leaf_not_on_tape():
    x, stranger = Tensor([1.0]), Tensor([5.0], name="stranger")
    with Tape() as tape:
        y = ad.sum(x)
        with pytest.raises(TapeError, match="stranger"):
            tape.backward(y, [stranger])


def test_no_tape_means_no_recording():
    x = Tensor([1.0])
    y = ad.scale(x, 2.0)
    assert y.node is None


# ---- errors

def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_only_scalars_broadcast():
    assert np.array_equal(ad.mul(Tensor(np.ones((2, 2))), 3.0).data, np.full((2, 2), 3.0))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_non_finite_operand_rejected():
    with pytest.raises(NonFiniteError):
        ad.relu(Tensor([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        ad.add(Tensor([np.inf]), 1.0)


# ---- grad_wrt_activation

def test_activation_gradient_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    with Tape() as tape:
        q = ad.relu(ad.scale(x, 2.0))
        out = ad.sum(q)
        g = tape.grad_wrt_activation(out, q)
    assert np.array_equal(g.data, np.ones((3, 4)))


def test_activation_gradient_of_linear_form():
    q0 = Tensor([5.0, 5.0])
    with Tape() as tape:
        q = ad.scale(q0, 1.0)
        out = ad.matmul(Tensor([2.0, -1.0]), q)
        g = tape.grad_wrt_activation(out, q)
    assert np.array_equal(g.data, [2.0, -1.0])


def test_activation_gradient_is_a_constant():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        q = ad.mul(x, x)
        g = tape.grad_wrt_activation(ad.sum(q), q)
    assert g.node is None and g not in tape


def test_disconnected_activation_warns_and_returns_zeros():
    x, other = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    with Tape() as tape:
        q = ad.scale(other, 1.0)
        out = ad.sum(ad.scale(x, 2.0))
        with pytest.warns(DisconnectedGradientWarning):
            g = tape.grad_wrt_activation(out, q)
    assert np.array_equal(g.data, [0.0, 0.0])


def test_silent_success_has_no_warning():
    x = Tensor([1.0])
    with Tape() as tape:
        q = ad.scale(x, 3.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            tape.grad_wrt_activation(ad.sum(q), q)


def test_activation_gradient_leaves_parameter_gradients_unchanged():
    rng = np.random.default_rng(1)
    w, x = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(5, 4)))
    with Tape() as tape:
        q = ad.matmul(x, w)
        out = ad.sum(ad.sigmoid(q))
        before = tape.backward(out, [w])[0]
        tape.grad_wrt_activation(out, q)
        after = tape.backward(out, [w])[0]
    assert np.array_equal(before, after)


def test_domain_cross_entropy_activation_gradient_matches_fd():
    rng = np.random.default_rng(2)
    phi = rng.normal(size=(5, 3))
    d = np.eye(3)[rng.integers(3, size=6)]

    def loss(q):
        logits = ad.matmul(ad.append_ones(q), Tensor(phi))
        return ad.scale(ad.sum(ad.mul(ad.log(ad.softmax(logits)), d)), -1.0)

    q0 = rng.normal(size=(6, 4))
    with Tape() as tape:
        q = ad.scale(Tensor(q0), 1.0)
        g = tape.grad_wrt_activation(loss(q), q).data
    assert rel_err(g, numeric_grad(lambda v: loss(Tensor(v)).item(), q0)) < 1e-4


# ---- finite-difference checks per op

RNG = np.random.default_rng(3)
A = RNG.normal(size=(3, 4))
B = RNG.normal(size=(3, 4))
M = RNG.normal(size=(4, 2))
P = RNG.uniform(0.2, 2.0, size=(3, 4))
HEAD = RNG.normal(size=(5, 2))

OP_CASES = {
    "add": (lambda a, b: ad.sum(ad.mul(ad.add(a, b), ad.add(a, b))), (A, B)),
    "sub": (lambda a, b: ad.sq_norm(ad.sub(a, b)), (A, B)),
    "mul": (lambda a, b: ad.sum(ad.mul(ad.mul(a, b), a)), (A, B)),
    "scale": (lambda a: ad.sq_norm(ad.scale(a, -1.7)), (A,)),
    "matmul": (lambda a, m: ad.sq_norm(ad.matmul(a, m)), (A, M)),
    "matvec": (lambda a, v: ad.sq_norm(ad.matmul(a, v)), (A, M[:, 0])),
    "vecmat": (lambda v, m: ad.sq_norm(ad.matmul(v, m)), (A[0], M)),
    "dot": (lambda u, v: ad.matmul(u, v), (A[0], B[0])),
    "bias_add": (lambda a, b: ad.sq_norm(ad.bias_add(a, b)), (A, B[0])),
    "relu": (lambda a: ad.sq_norm(ad.relu(a)), (A,)),
    "sigmoid": (lambda a: ad.sum(ad.mul(ad.sigmoid(a), B)), (A,)),
    "softmax": (lambda a: ad.sum(ad.mul(ad.softmax(a), B)), (A,)),
    "log": (lambda p: ad.sum(ad.mul(ad.log(p), B)), (P,)),
    "sum_axis0": (lambda a: ad.sq_norm(ad.sum(a, axis=0)), (A,)),
    "sum_axis1": (lambda a: ad.sq_norm(ad.sum(a, axis=1)), (A,)),
    "mean": (lambda a: ad.sq_norm(ad.mean(a, axis=0)), (A,)),
    "mean_all": (lambda a: ad.mul(ad.mean(a), ad.mean(a)), (A,)),
    "hinge": (lambda a: ad.sum(ad.mul(ad.hinge(a), B)), (A,)),
    "concat": (lambda a, b: ad.sq_norm(ad.mul(ad.concat([a, b], axis=1), ad.concat([b, a], axis=1))), (A, B)),
    "row_select": (lambda a: ad.sq_norm(ad.row_select(a, [2, 0, 2])), (A,)),
    "append_ones": (lambda a: ad.sq_norm(ad.matmul(ad.append_ones(a), HEAD)), (A,)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    build, values = OP_CASES[name]
    check_fd(build, *values)


def test_log_clamp_has_zero_gradient_below_floor():
    _, (g,) = grad_of(lambda p: ad.sum(ad.log(p)), [0.0, 1e-13, 2.0])
    assert np.array_equal(g, [0.0, 0.0, 0.5])


def test_hinge_subgradient_is_zero_at_kink():
    value, (g,) = grad_of(lambda t: ad.sum(ad.hinge(t)), [1.0, 0.5, 2.0])
    assert value == 0.5
    assert np.array_equal(g, [0.0, -1.0, 0.0])


def test_row_select_scatters_repeated_rows():
    _, (g,) = grad_of(lambda a: ad.sum(ad.row_select(a, [1, 1, 0])), np.zeros((3, 2)))
    assert np.array_equal(g, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_grad_reverse_flips_and_scales():
    value, (g,) = grad_of(lambda a: ad.sum(ad.grad_reverse(a, 0.5)), [1.0, 2.0])
    assert value == 3.0
    assert np.array_equal(g, [-0.5, -0.5])


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(ad.detach(x), x)
        (g,) = tape.backward(ad.sum(y), [x])
    assert np.array_equal(g, [1.0, 2.0])


def test_two_layer_cross_entropy_matches_fd_for_every_parameter():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 5))
    y = np.eye(3)[rng.integers(3, size=6)]
    params = [rng.normal(size=(5, 7)), rng.normal(size=7), rng.normal(size=(7, 3)), rng.normal(size=3)]

    def loss(w1, b1, w2, b2):
        h = ad.relu(ad.bias_add(ad.matmul(Tensor(x), w1), b1))
        logits = ad.bias_add(ad.matmul(h, w2), b2)
        return ad.scale(ad.mean(ad.sum(ad.mul(ad.log(ad.softmax(logits)), y), axis=1)), -1.0)

    check_fd(loss, *params)


# ---- randomized composite expressions

UNARY = ("relu", "sigmoid", "scale", "square", "softmax", "logsig")


def _apply(op, t):
    if op == "relu":
        return ad.relu(t)
    if op == "sigmoid":
        return ad.sigmoid(t)
    if op == "scale":
        return ad.scale(t, 0.7)
    if op == "square":
        return ad.mul(t, t)
    if op == "softmax":
        return ad.softmax(t)
    return ad.log(ad.sigmoid(t))


@settings(max_examples=60, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(1, 32), inner=st.integers(1, 8),
       ops=st.lists(st.sampled_from(UNARY), min_size=1, max_size=4), seed=st.integers(0, 2**31 - 1))
def test_random_composites_match_finite_differences(rows, cols, inner, ops, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, inner))
    w = rng.normal(size=(inner, cols)) / np.sqrt(inner)
    c = rng.normal(size=(rows, cols))
    kink_gap = []

    def build(x, w):
        h = ad.matmul(x, w)
        for op in ops:
            if op == "relu":
                kink_gap.append(np.min(np.abs(h.data)))
            h = _apply(op, h)
        return ad.sum(ad.mul(h, c))

    _, grads = grad_of(build, x, w)
    # finite differences straddling a relu kink are meaningless
    if kink_gap and min(kink_gap) < 1e-3:
        return
    for k, v in enumerate((x, w)):
        def f(val, k=k):
            args = [Tensor(x), Tensor(w)]
            args[k] = Tensor(val)
            return build(*args).item()
        assert rel_err(grads[k], numeric_grad(f, v)) < 1e-4


def test_backward_is_linear():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(4, 3)))
    a, b = 1.7, -0.3

    def f(t):
        return ad.sum(ad.sigmoid(ad.mul(t, t)))

    def g(t):
        return ad.sq_norm(ad.softmax(t))

    with Tape() as tape:
        combo = ad.add(ad.scale(f(x), a), ad.scale(g(x), b))
        (gc,) = tape.backward(combo, [x])
    with Tape() as tape:
        (gf,) = tape.backward(f(x), [x])
    with Tape() as tape:
        (gg,) = tape.backward(g(x), [x])
    assert np.max(np.abs(gc - (a * gf + b * gg))) < 1e-12


def test_determinism_is_bitwise():
    def run():
        rng = np.random.default_rng(6)
        w = Tensor(rng.normal(size=(8, 4)))
        x = Tensor(rng.normal(size=(10, 8)))
        with Tape() as tape:
            out = ad.sum(ad.log(ad.softmax(ad.matmul(x, w))))
            return out.item(), tape.backward(out, [w])[0]

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2 and g1.tobytes() == g2.tobytes()


def test_tape_topological_order():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.relu(ad.add(ad.scale(x, 2.0), x))
        ad.sum(y)
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert inp.node.index < node.index
