"""Exact batch ridge regression for the hybrid CTR@1 model.

The regularized least-squares problem has ``d + N`` unknowns (``N`` distinct
pairs) but eliminating the pair biases leaves a ``d x d`` system, so the
solve costs ``O(d^3 + d^2 N)`` instead of ``O((d + N)^3)``::

    M    = A0 - sum_j b_j b_j^T / a_j
    r    = d0 - sum_j d_j b_j / a_j
    beta = M^{-1} r
    b_j  = (d_j - b_j^T beta) / a_j
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractViolation
from .model import HyperParams, ModelState, PairKey, resolve_key
from .validation import check_clicks, check_matrix, check_position, check_vector


@dataclass(frozen=True, eq=False)
class TrainingExample:
    key: PairKey
    x: np.ndarray
    c: int
    p: int = 1

    def __post_init__(self):
        if self.c not in (0, 1):
            raise ContractViolation(f"click label must be 0 or 1, got {self.c!r}")
        if self.p < 1:
            raise ContractViolation(f"position must be >= 1, got {self.p}")


class SufficientStats:
    """Running sums that determine the exact ridge solution.

    ``A0`` and ``d0`` include the ``lambda1`` prior terms; each pair's ``a``
    and ``d`` include the ``lambda2`` prior terms. A pair never seen has
    ``a = lambda2``, ``b = 0`` and ``d = lambda2 * prior``.

    Parameters
    ----------
    hyper : HyperParams
    pair_prior : mapping, optional
        Per-pair bias priors (warm start). Pairs not listed use ``hyper.b0``.
    """

    def __init__(self, hyper: HyperParams, pair_prior: Mapping[PairKey, float] | None = None):
        self.hyper = hyper
        d = hyper.d
        self.A0 = hyper.lambda1 * np.eye(d)
        self.d0 = hyper.lambda1 * np.asarray(hyper.beta0, dtype=np.float64).copy()
        self.pair_prior = dict(pair_prior or {})
        self.index: dict[PairKey, int] = {}
        self._a = np.empty(16)
        self._B = np.empty((16, d))
        self._d = np.empty(16)
        self.n = 0

    @property
    def n_pairs(self) -> int:
        return len(self.index)

    @property
    def a(self) -> np.ndarray:
        return self._a[: self.n_pairs]

    @property
    def B(self) -> np.ndarray:
        return self._B[: self.n_pairs]

    @property
    def dj(self) -> np.ndarray:
        return self._d[: self.n_pairs]

    def prior(self, key: PairKey) -> float:
        return self.pair_prior.get(key, self.hyper.b0)

    def pair(self, key: PairKey) -> tuple[float, np.ndarray, float]:
        """``(a_j, b_j, d_j)`` for ``key``; the fresh-pair state if unseen."""
        key = resolve_key(key, self.hyper)
        j = self.index.get(key)
        if j is None:
            lam2 = self.hyper.lambda2
            return lam2, np.zeros(self.hyper.d), lam2 * self.prior(key)
        return float(self._a[j]), self._B[j].copy(), float(self._d[j])

    def _slot(self, key: PairKey) -> int:
        j = self.index.get(key)
        if j is None:
            j = len(self.index)
            if j == self._a.shape[0]:
                cap = 2 * j
                self._a = np.resize(self._a, cap)
                self._d = np.resize(self._d, cap)
                B = np.empty((cap, self.hyper.d))
                B[:j] = self._B
                self._B = B
            lam2 = self.hyper.lambda2
            self._a[j] = lam2
            self._B[j] = 0.0
            self._d[j] = lam2 * self.prior(key)
            self.index[key] = j
        return j

    def add(self, key: PairKey, x: np.ndarray, c: int) -> int | None:
        """Fold one position-1 example in; returns the pair's slot (None without biases)."""
        self.A0 += np.outer(x, x)
        if c:
            self.d0 += x
        self.n += 1
        if not self.hyper.fit_bias:
            return None
        j = self._slot(resolve_key(key, self.hyper))
        self._a[j] += 1.0
        self._B[j] += x
        self._d[j] += c
        return j

    def add_batch(self, keys: Sequence[PairKey], X: np.ndarray, c: np.ndarray) -> None:
        """Vectorized equivalent of calling :meth:`add` row by row."""
        X = check_matrix(X, self.hyper.d)
        c = check_clicks(c).astype(np.float64)
        if len(keys) != X.shape[0] or c.shape[0] != X.shape[0]:
            raise ContractViolation("keys, X and c must have the same length")
        self.A0 += X.T @ X
        self.d0 += X.T @ c
        self.n += X.shape[0]
        if not self.hyper.fit_bias or not len(keys):
            return
        slots = np.fromiter((self._slot(resolve_key(k, self.hyper)) for k in keys),
                            dtype=np.intp, count=len(keys))
        np.add.at(self._a, slots, 1.0)
        np.add.at(self._B, slots, X)
        np.add.at(self._d, slots, c)

    def system(self) -> tuple[np.ndarray, np.ndarray]:
        """The reduced ``d x d`` system ``(M, r)`` with pair biases eliminated."""
        if not self.hyper.fit_bias or not self.n_pairs:
            return self.A0.copy(), self.d0.copy()
        a, B, dj = self.a, self.B, self.dj
        M = self.A0 - (B.T / a) @ B
        r = self.d0 - B.T @ (dj / a)
        return M, r

    def copy(self) -> "SufficientStats":
        other = SufficientStats(self.hyper, self.pair_prior)
        other.A0 = self.A0.copy()
        other.d0 = self.d0.copy()
        other.index = dict(self.index)
        other._a = self._a.copy()
        other._B = self._B.copy()
        other._d = self._d.copy()
        other.n = self.n
        return other

    # -- checkpoint ----------------------------------------------------
    def to_dict(self) -> dict:
        pairs = {}
        # slot order is kept so a reloaded checkpoint sums in the same order
        for key, j in self.index.items():
            pairs[key.encode()] = {"a": float(self._a[j]), "b": self._B[j].tolist(),
                                   "d": float(self._d[j])}
        return {
            "A0": self.A0.tolist(),
            "d0": self.d0.tolist(),
            "pairs": pairs,
            "n": self.n,
            "hyper": self.hyper.to_dict(),
            "pair_prior": {k.encode(): v for k, v in sorted(
                self.pair_prior.items(), key=lambda kv: (kv[0].query_id, kv[0].doc_id))},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping) -> "SufficientStats":
        hyper = HyperParams.from_dict(data["hyper"])
        prior = {PairKey.decode(k): float(v) for k, v in data.get("pair_prior", {}).items()}
        stats = cls(hyper, prior)
        stats.A0 = np.array(data["A0"], dtype=np.float64)
        stats.d0 = np.array(data["d0"], dtype=np.float64)
        stats.n = int(data["n"])
        for text, entry in data["pairs"].items():
            j = stats._slot(PairKey.decode(text))
            stats._a[j] = entry["a"]
            stats._B[j] = entry["b"]
            stats._d[j] = entry["d"]
        return stats

    @classmethod
    def from_json(cls, text: str) -> "SufficientStats":
        return cls.from_dict(json.loads(text))


def accumulate(stats: SufficientStats, ex: TrainingExample) -> SufficientStats:
    """Add one example to ``stats`` in place and return it."""
    x = check_vector(ex.x, stats.hyper.d)
    stats.add(ex.key, x, ex.c)
    return stats


def _closed_form(A0, d0, a, B, dj):
    """Solve the partitioned normal equations; returns ``(theta, pair_biases)``."""
    if a.shape[0]:
        M = A0 - (B.T / a) @ B
        r = d0 - B.T @ (dj / a)
    else:
        M, r = A0, d0
    theta = cho_solve(cho_factor(M, lower=True), r)
    biases = (dj - B @ theta) / a if a.shape[0] else np.empty(0)
    return theta, biases


def _check_consistent(stats: SufficientStats, hyper: HyperParams) -> None:
    mine = stats.hyper
    if (mine.d, mine.lambda1, mine.lambda2, mine.b0, mine.fit_bias) != (
            hyper.d, hyper.lambda1, hyper.lambda2, hyper.b0, hyper.fit_bias) or not np.array_equal(
            mine.beta0, hyper.beta0):
        raise ContractViolation("statistics were accumulated under different hyperparameters")


def solve(stats: SufficientStats, hyper: HyperParams | None = None) -> ModelState:
    """Exact minimizer of the regularized square loss over the accumulated data."""
    hyper = stats.hyper if hyper is None else hyper
    _check_consistent(stats, hyper)
    if stats.n == 0:
        return ModelState(hyper.beta0, dict(stats.pair_prior), np.zeros(hyper.s), hyper)
    beta, biases = _closed_form(stats.A0, stats.d0, stats.a, stats.B, stats.dj)
    pair_bias = dict(stats.pair_prior)
    if hyper.fit_bias:
        pair_bias.update(zip(stats.index, biases.tolist()))
    return ModelState(beta, pair_bias, np.zeros(hyper.s), hyper)


def solve_with_positions(data: Iterable[TrainingExample], hyper: HyperParams,
                         fit_positions: bool = True,
                         pair_prior: Mapping[PairKey, float] | None = None) -> ModelState:
    """Exact minimizer of the loss over clicks at several display positions.

    Position biases ``b_2..b_s`` enter as extra shared coefficients on a
    one-hot encoding of the position, regularized by ``lambda3`` towards
    ``bp0``. With ``fit_positions=False`` every ``b_p`` is pinned to 0, so
    clicks from all positions are pooled as if shown at position 1.

    Re-ranking still uses CTR@1 only; the fitted position biases are stored
    in ``pos_bias`` for inspection.
    """
    data = list(data)
    d, s = hyper.d, hyper.s
    n_pos = s - 1 if fit_positions else 0
    if not data:
        pos = hyper.bp0.copy() if fit_positions else np.zeros(s)
        return ModelState(hyper.beta0, dict(pair_prior or {}), pos, hyper)
    X = check_matrix(np.stack([np.asarray(ex.x, dtype=np.float64) for ex in data]), d)
    c = np.array([ex.c for ex in data], dtype=np.float64)
    p = np.array([check_position(ex.p, s) for ex in data])

    Z = np.zeros((len(data), d + n_pos))
    Z[:, :d] = X
    if n_pos:
        rows = np.flatnonzero(p > 1)
        Z[rows, d + p[rows] - 2] = 1.0
    reg = np.concatenate([np.full(d, hyper.lambda1), np.full(n_pos, hyper.lambda3)])
    prior = np.concatenate([hyper.beta0, hyper.bp0[1:] if n_pos else np.empty(0)])
    A0 = np.diag(reg) + Z.T @ Z
    d0 = reg * prior + Z.T @ c

    pair_prior = dict(pair_prior or {})
    if hyper.fit_bias:
        index: dict[PairKey, int] = {}
        slots = np.array([index.setdefault(resolve_key(ex.key, hyper), len(index)) for ex in data])
        N = len(index)
        a = np.full(N, hyper.lambda2) + np.bincount(slots, minlength=N)
        B = np.zeros((N, Z.shape[1]))
        np.add.at(B, slots, Z)
        priors = np.array([pair_prior.get(k, hyper.b0) for k in index])
        dj = hyper.lambda2 * priors + np.bincount(slots, weights=c, minlength=N)
    else:
        index, a, B, dj = {}, np.empty(0), np.empty((0, Z.shape[1])), np.empty(0)

    theta, biases = _closed_form(A0, d0, a, B, dj)
    pos = np.zeros(s)
    if n_pos:
        pos[1:] = theta[d:]
    pair_prior.update(zip(index, biases.tolist()))
    return ModelState(theta[:d], pair_prior, pos, hyper)


def _as_keys(keys) -> list[PairKey]:
    return [k if isinstance(k, PairKey) else PairKey(*k) for k in keys]


class HybridRidgeCTR(RegressorMixin, BaseEstimator):
    """Scikit-learn estimator for the hybrid CTR@1 model.

    ``fit`` takes the usual ``X, y`` plus ``keys`` (one ``PairKey`` or
    ``(query_id, doc_id)`` tuple per row). Without ``keys`` the model is a
    plain ridge regression towards ``beta0``.

    Parameters
    ----------
    lambda1, lambda2, lambda3 : float, default=10
    b0 : float, default=0
    beta0 : array-like, optional
    fit_bias : bool, default=True
    fit_positions : bool, default=False
        Learn additive position biases from the ``positions`` passed to fit.
    n_positions : int, default=4
    hash_buckets : int, optional

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    pair_bias_ : dict
    pos_bias_ : ndarray of shape (n_positions,)
    state_ : ModelState
    """

    def __init__(self, lambda1=10.0, lambda2=10.0, lambda3=10.0, b0=0.0, beta0=None,
                 fit_bias=True, fit_positions=False, n_positions=4, hash_buckets=None):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.b0 = b0
        self.beta0 = beta0
        self.fit_bias = fit_bias
        self.fit_positions = fit_positions
        self.n_positions = n_positions
        self.hash_buckets = hash_buckets

    def _hyper(self, d: int) -> HyperParams:
        return HyperParams(d=d, s=self.n_positions, lambda1=self.lambda1, lambda2=self.lambda2,
                           lambda3=self.lambda3, beta0=self.beta0, b0=self.b0,
                           fit_bias=self.fit_bias, hash_buckets=self.hash_buckets)

    def fit(self, X, y, keys=None, positions=None):
        X = check_matrix(X)
        y = check_clicks(y)
        if y.shape[0] != X.shape[0]:
            raise ContractViolation("X and y have different lengths")
        hyper = self._hyper(X.shape[1])
        if keys is None:
            hyper = hyper.replace(fit_bias=False)
            keys = [PairKey("_", str(i)) for i in range(X.shape[0])]
        keys = _as_keys(keys)
        if positions is None and not self.fit_positions:
            stats = SufficientStats(hyper)
            stats.add_batch(keys, X, y)
            self.stats_ = stats
            state = solve(stats)
        else:
            positions = np.ones(X.shape[0], dtype=int) if positions is None else positions
            data = [TrainingExample(k, x, int(c), int(p))
                    for k, x, c, p in zip(keys, X, y, positions)]
            state = solve_with_positions(data, hyper, fit_positions=self.fit_positions)
        self.state_ = state
        self.coef_ = state.beta
        self.pair_bias_ = dict(state.pair_bias)
        self.pos_bias_ = state.pos_bias
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, keys=None):
        check_is_fitted(self, "state_")
        X = check_matrix(X, self.n_features_in_)
        if keys is None:
            return X @ self.coef_
        return self.state_.scores(_as_keys(keys), X)
