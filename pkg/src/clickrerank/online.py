"""Incremental exact ridge learning with warm start.

Each position-1 example changes the reduced system matrix
``M = A0 - sum_j b_j b_j^T / a_j`` by a single positive rank-one term.
For a pair with statistics ``(a, b)`` before the update::

    M_new = M + x x^T + b b^T / a - (b + x)(b + x)^T / (a + 1)
          = M + a / (a + 1) * u u^T,        u = x - b / a

so one Sherman-Morrison step keeps ``M^{-1}`` current in ``O(d^2)``.
Pair biases are evaluated lazily from the current ``beta``.
"""
from __future__ import annotations

import json
from typing import Mapping

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .batch import SufficientStats, TrainingExample
from .exceptions import ContractViolation
from .model import HyperParams, ModelState, PairKey, resolve_key
from .validation import check_clicks, check_matrix, check_vector

MODES = ("exact_full", "rank_one", "diagonal")


class OnlineLearner:
    """Online learner for the hybrid CTR@1 model.

    Parameters
    ----------
    hyper : HyperParams
    warm : ModelState, optional
        Batch model whose ``beta`` and pair biases become the priors.
    mode : {"exact_full", "rank_one", "diagonal"}
        ``exact_full`` re-solves the ``d x d`` system on demand,
        ``rank_one`` maintains its inverse by Sherman-Morrison, and
        ``diagonal`` ignores off-diagonal entries of the system matrix.
    beta_frozen : bool, default=False
        Keep ``beta`` at its prior; only pair biases learn.
    lazy : bool, default=True
        Compute pair biases on read. ``lazy=False`` refreshes every bias after
        each update (``O(N d)``; kept as a reference path).
    rebuild_every : int, default=10000
        In ``rank_one`` mode, refactorize the inverse from scratch after this
        many updates to bound round-off drift.
    """

    def __init__(self, hyper: HyperParams, warm: ModelState | None = None, mode: str = "rank_one",
                 beta_frozen: bool = False, lazy: bool = True, rebuild_every: int = 10_000):
        if mode not in MODES:
            raise ContractViolation(f"unknown mode {mode!r}; expected one of {MODES}")
        pair_prior: Mapping[PairKey, float] = {}
        if warm is not None:
            if warm.hyper.d != hyper.d or warm.hyper.s != hyper.s:
                raise ContractViolation(
                    f"warm model has (d, s) = ({warm.hyper.d}, {warm.hyper.s}), "
                    f"expected ({hyper.d}, {hyper.s})")
            hyper = hyper.replace(beta0=warm.beta.tolist(), b0=warm.hyper.b0)
            if hyper.fit_bias:
                pair_prior = dict(warm.pair_bias)
        self.hyper = hyper
        self.mode = mode
        self.beta_frozen = beta_frozen
        self.lazy = lazy
        self.rebuild_every = rebuild_every
        self.stats = SufficientStats(hyper, pair_prior)
        d = hyper.d
        self.r = self.stats.d0.copy()
        self.M = self.stats.A0.copy()
        self.M_inv = np.eye(d) / hyper.lambda1 if mode == "rank_one" else None
        self.dirty_pairs: set[PairKey] = set()
        self._updates_since_rebuild = 0
        self._beta: np.ndarray | None = None
        self._bias_cache: dict[PairKey, float] = {}
        self._snapshot: ModelState | None = None

    # -- updates -------------------------------------------------------
    def observe(self, key: PairKey, x, c: int, p: int = 1) -> "OnlineLearner":
        """Fold in one position-1 click observation."""
        if p != 1:
            raise ContractViolation("online learning uses position-1 clicks only (p must be 1)")
        if c not in (0, 1):
            raise ContractViolation(f"click label must be 0 or 1, got {c!r}")
        x = check_vector(x, self.hyper.d)
        stats = self.stats
        if self.hyper.fit_bias:
            rkey = resolve_key(key, self.hyper)
            a, b, dj = stats.pair(rkey)
            u = x - b / a
            w = a / (a + 1.0)
            stats.add(rkey, x, c)
            a1, b1, d1 = a + 1.0, b + x, dj + c
            self.r += c * x - (d1 / a1) * b1 + (dj / a) * b
            self.dirty_pairs.add(rkey)
        else:
            u, w = x, 1.0
            stats.add(key, x, c)
            self.r += c * x
        self.M += w * np.outer(u, u)
        if self.mode == "rank_one":
            self._sherman_morrison(u, w)
        if not self.beta_frozen:
            self._beta = None
            self._bias_cache.clear()
            self.dirty_pairs.clear()
        self._snapshot = None
        if not self.lazy:
            self._refresh_all_biases()
        return self

    def observe_example(self, ex: TrainingExample) -> "OnlineLearner":
        return self.observe(ex.key, ex.x, ex.c, ex.p)

    def _sherman_morrison(self, u: np.ndarray, w: float) -> None:
        self._updates_since_rebuild += 1
        if self._updates_since_rebuild >= self.rebuild_every:
            self.rebuild_inverse()
            return
        v = self.M_inv @ u
        self.M_inv -= (w / (1.0 + w * (u @ v))) * np.outer(v, v)

    def rebuild_inverse(self) -> None:
        """Recompute the cached inverse from the explicitly tracked matrix."""
        M, _ = self.stats.system()
        self.M = M
        self.M_inv = cho_solve(cho_factor(M, lower=True), np.eye(self.hyper.d))
        self._updates_since_rebuild = 0

    # -- reads ---------------------------------------------------------
    @property
    def beta(self) -> np.ndarray:
        if self._beta is None:
            if self.beta_frozen or self.stats.n == 0:
                beta = np.array(self.hyper.beta0)
            elif self.mode == "rank_one":
                beta = self.M_inv @ self.r
            elif self.mode == "diagonal":
                beta = self.r / np.diag(self.M)
            else:
                M, r = self.stats.system()
                beta = cho_solve(cho_factor(M, lower=True), r)
            beta.setflags(write=False)
            self._beta = beta
        return self._beta

    def bias(self, key: PairKey) -> float:
        """Current bias of ``key``, refreshed on demand."""
        if not self.hyper.fit_bias:
            return 0.0
        rkey = resolve_key(key, self.hyper)
        cached = self._bias_cache.get(rkey)
        if cached is not None and rkey not in self.dirty_pairs:
            return cached
        stats = self.stats
        j = stats.index.get(rkey)
        if j is None:
            value = stats.prior(rkey)
        else:
            value = float((stats._d[j] - stats._B[j] @ self.beta) / stats._a[j])
        self._bias_cache[rkey] = value
        self.dirty_pairs.discard(rkey)
        return value

    def _refresh_all_biases(self) -> None:
        stats = self.stats
        if not self.hyper.fit_bias or not stats.n_pairs:
            return
        values = (stats.dj - stats.B @ self.beta) / stats.a
        self._bias_cache = dict(zip(stats.index, values.tolist()))
        self.dirty_pairs.clear()

    def predict_ctr1(self, key: PairKey, x) -> float:
        return float(self.beta @ np.asarray(x, dtype=np.float64)) + self.bias(key)

    def scores(self, keys, X: np.ndarray) -> np.ndarray:
        return X @ self.beta + np.array([self.bias(k) for k in keys])

    def current_model(self) -> ModelState:
        """Immutable snapshot of the model implied by the current statistics."""
        if self._snapshot is None:
            pair_bias = dict(self.stats.pair_prior)
            if self.hyper.fit_bias:
                for key in self.stats.index:
                    pair_bias[key] = self.bias(key)
            self._snapshot = ModelState(self.beta, pair_bias, np.zeros(self.hyper.s), self.hyper)
        return self._snapshot

    def system_matrix(self) -> np.ndarray:
        """``M`` recomputed directly from the sufficient statistics."""
        return self.stats.system()[0]

    # -- checkpoint ----------------------------------------------------
    def checkpoint(self) -> dict:
        return {
            "model": self.current_model().to_dict(),
            "stats": self.stats.to_dict(),
            "learner": {
                "mode": self.mode,
                "beta_frozen": self.beta_frozen,
                "lazy": self.lazy,
                "rebuild_every": self.rebuild_every,
                "updates_since_rebuild": self._updates_since_rebuild,
                "M": self.M.tolist(),
                "M_inv": None if self.M_inv is None else self.M_inv.tolist(),
                "r": self.r.tolist(),
            },
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.checkpoint(), fh)

    @classmethod
    def from_checkpoint(cls, data: Mapping) -> "OnlineLearner":
        stats = SufficientStats.from_dict(data["stats"])
        info = data["learner"]
        learner = cls(stats.hyper, mode=info["mode"], beta_frozen=info["beta_frozen"],
                      lazy=info["lazy"], rebuild_every=info["rebuild_every"])
        learner.stats = stats
        learner.M = np.array(info["M"], dtype=np.float64)
        learner.r = np.array(info["r"], dtype=np.float64)
        if info["M_inv"] is not None:
            learner.M_inv = np.array(info["M_inv"], dtype=np.float64)
        learner._updates_since_rebuild = info["updates_since_rebuild"]
        return learner

    @classmethod
    def load(cls, path) -> "OnlineLearner":
        with open(path, encoding="utf-8") as fh:
            return cls.from_checkpoint(json.load(fh))


def init_learner(warm: ModelState | None, hyper: HyperParams, mode: str = "rank_one",
                 **kwargs) -> OnlineLearner:
    return OnlineLearner(hyper, warm=warm, mode=mode, **kwargs)


class OnlineHybridRidgeCTR(RegressorMixin, BaseEstimator):
    """Estimator wrapper exposing :class:`OnlineLearner` through ``partial_fit``."""

    def __init__(self, lambda1=10.0, lambda2=10.0, b0=0.0, fit_bias=True, mode="rank_one",
                 beta_frozen=False, warm_start_model=None, n_positions=4):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.b0 = b0
        self.fit_bias = fit_bias
        self.mode = mode
        self.beta_frozen = beta_frozen
        self.warm_start_model = warm_start_model
        self.n_positions = n_positions

    def partial_fit(self, X, y, keys):
        X = check_matrix(X)
        y = check_clicks(y)
        if not hasattr(self, "learner_"):
            hyper = HyperParams(d=X.shape[1], s=self.n_positions, lambda1=self.lambda1,
                                lambda2=self.lambda2, b0=self.b0, fit_bias=self.fit_bias)
            self.learner_ = OnlineLearner(hyper, warm=self.warm_start_model, mode=self.mode,
                                          beta_frozen=self.beta_frozen)
            self.n_features_in_ = X.shape[1]
        for k, x, c in zip(keys, X, y):
            k = k if isinstance(k, PairKey) else PairKey(*k)
            self.learner_.observe(k, x, int(c))
        return self

    def fit(self, X, y, keys):
        if hasattr(self, "learner_"):
            del self.learner_
        return self.partial_fit(X, y, keys)

    def predict(self, X, keys):
        check_is_fitted(self, "learner_")
        X = check_matrix(X, self.n_features_in_)
        keys = [k if isinstance(k, PairKey) else PairKey(*k) for k in keys]
        return self.learner_.scores(keys, X)

    @property
    def coef_(self) -> np.ndarray:
        check_is_fitted(self, "learner_")
        return self.learner_.beta
