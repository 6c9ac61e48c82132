"""Shared fixtures and independent oracles.

The oracles below solve the regularized least-squares problems as one dense
stacked system with ``numpy.linalg.lstsq`` (SVD), deliberately avoiding the
partitioned normal equations used by the package.
"""
from __future__ import annotations

import numpy as np
import pytest

from clickrerank import HyperParams, PairKey, TrainingExample


def random_instance(rng, d=None, n_pairs=None, t=None, s=4, positions=False):
    d = d or int(rng.integers(1, 6))
    n_pairs = n_pairs or int(rng.integers(1, 9))
    t = t or int(rng.integers(1, 41))
    keys = [PairKey(f"q{j % 3}", f"u{j}") for j in range(n_pairs)]
    data = []
    for _ in range(t):
        k = keys[int(rng.integers(n_pairs))]
        p = int(rng.integers(1, s + 1)) if positions else 1
        data.append(TrainingExample(k, rng.normal(size=d), int(rng.integers(2)), p))
    hyper = HyperParams(d=d, s=s, lambda1=float(rng.uniform(0.1, 20)), lambda2=float(rng.uniform(0.1, 20)),
                        lambda3=float(rng.uniform(0.1, 20)), beta0=rng.normal(size=d),
                        b0=float(rng.normal(scale=0.3)), bp0=[0.0, *rng.normal(scale=0.1, size=s - 1)])
    return data, hyper


def dense_oracle(data, hyper, pair_prior=None, positions=False):
    """Minimize the ridge loss by stacking data and prior rows into one least-squares system.

    Unknowns are ``[beta (d), pair biases (N), position biases b_2..b_s]``.
    Returns ``(beta, {key: bias}, pos_bias)``.
    """
    pair_prior = pair_prior or {}
    d, s = hyper.d, hyper.s
    keys = list(dict.fromkeys(ex.key for ex in data)) if hyper.fit_bias else []
    N = len(keys)
    P = s - 1 if positions else 0
    col = {k: d + j for j, k in enumerate(keys)}
    rows, target = [], []
    for ex in data:
        row = np.zeros(d + N + P)
        row[:d] = ex.x
        if N:
            row[col[ex.key]] = 1.0
        if P and ex.p > 1:
            row[d + N + ex.p - 2] = 1.0
        rows.append(row)
        target.append(ex.c)
    reg = np.concatenate([np.full(d, hyper.lambda1), np.full(N, hyper.lambda2), np.full(P, hyper.lambda3)])
    prior = np.concatenate([hyper.beta0, [pair_prior.get(k, hyper.b0) for k in keys],
                            hyper.bp0[1:] if P else []])
    A = np.vstack([np.array(rows).reshape(len(rows), d + N + P), np.diag(np.sqrt(reg))])
    y = np.concatenate([target, np.sqrt(reg) * prior])
    theta = np.linalg.lstsq(A, y, rcond=None)[0]
    pos = np.zeros(s)
    if P:
        pos[1:] = theta[d + N:]
    return theta[:d], dict(zip(keys, theta[d:d + N])), pos


def loss_gradient(data, hyper, beta, biases, pos=None, pair_prior=None):
    """Analytic gradient of the ridge loss (no factor 1/2) at the given point."""
    pair_prior = pair_prior or {}
    g_beta = 2 * hyper.lambda1 * (beta - hyper.beta0)
    g_b = {k: 2 * hyper.lambda2 * (b - pair_prior.get(k, hyper.b0)) for k, b in biases.items()}
    g_pos = np.zeros(hyper.s)
    if pos is not None:
        g_pos[1:] = 2 * hyper.lambda3 * (pos[1:] - hyper.bp0[1:])
    for ex in data:
        pred = ex.x @ beta + biases.get(ex.key, 0.0) + (pos[ex.p - 1] if pos is not None else 0.0)
        resid = pred - ex.c
        g_beta += 2 * resid * ex.x
        if ex.key in g_b:
            g_b[ex.key] += 2 * resid
        if pos is not None and ex.p > 1:
            g_pos[ex.p - 1] += 2 * resid
    return g_beta, g_b, g_pos


def rel_err(a, b):
    """Elementwise error scaled by ``max(1, |b|)``; returns the worst entry."""
    a, b = np.atleast_1d(np.asarray(a, dtype=float)), np.atleast_1d(np.asarray(b, dtype=float))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """List collecting ``(criterion, passed, detail)`` for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(results):
        terminalreporter.write_line(f"{label}: {'PASS' if passed else 'FAIL'} ({detail})")
