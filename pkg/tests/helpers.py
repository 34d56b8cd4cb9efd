"""Finite-difference oracle and small shared fixtures for the test suite."""

import numpy as np

from debias_dg.losses import one_hot
from debias_dg.trainer import STEP_FUNCTIONS, BatchSampler, DomainBatch, init_state, rng_streams

H = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def small_batch(seed=0, n=12, dim=4, classes=3, domains=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    y = one_hot(rng.integers(classes, size=n), classes)
    d = np.arange(n) % domains
    return DomainBatch(x, y, d)


def make_state(cfg, dim=4, classes=3, domains=2):
    return init_state(cfg, dim, classes, domains)


def run_steps(cfg, n_steps=100, seed=0, dim=4, classes=3, domains=2):
    """Apply ``n_steps`` updates of ``cfg.strategy`` to a fresh state on a fixed batch stream."""
    state = make_state(cfg, dim, classes, domains)
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(40, dim)) + k for k in range(domains)]
    ys = [one_hot(rng.integers(classes, size=40), classes) for _ in range(domains)]
    streams = rng_streams(cfg.seed)
    sampler = BatchSampler(xs, ys, cfg.batch_size, streams["batch"])
    step = STEP_FUNCTIONS[cfg.strategy]
    metrics = []
    for _ in range(n_steps):
        metrics.append(step(state, sampler.sample(), cfg, streams["tap"]))
    return state, metrics


def max_dev(a, b):
    sa, sb = a.snapshot(), b.snapshot()
    assert sa.keys() == sb.keys()
    return max(float(np.max(np.abs(sa[k] - sb[k]))) for k in sa)
