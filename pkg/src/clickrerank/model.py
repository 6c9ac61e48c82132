"""Hybrid linear CTR@1 model: shared coefficients plus per-(query, document) biases.

The score of a pair is ``beta @ x + pair_bias[key]``. Scores are unclamped
reals; only their ordering is used for re-ranking.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .exceptions import ContractViolation
from .validation import check_position, check_vector

KEY_SEPARATOR = "\u0000"
_BUCKET_QUERY = "\u0001bucket"


@dataclass(frozen=True, slots=True)
class PairKey:
    """Identifier of a distinct (query, document) pair. Ids are opaque strings."""

    query_id: str
    doc_id: str

    def __post_init__(self):
        if not self.query_id or not self.doc_id:
            raise ContractViolation("PairKey ids must be non-empty strings")

    def encode(self) -> str:
        return f"{self.query_id}{KEY_SEPARATOR}{self.doc_id}"

    @classmethod
    def decode(cls, text: str) -> "PairKey":
        qid, sep, did = text.partition(KEY_SEPARATOR)
        if not sep:
            raise ContractViolation(f"malformed pair key {text!r}")
        return cls(qid, did)


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Regularization strengths and priors.

    Parameters
    ----------
    d : int
        Feature dimension.
    s : int, default=4
        Number of re-ranked top documents.
    lambda1, lambda2, lambda3 : float, default=10
        Ridge strengths on ``beta``, pair biases and position biases.
    beta0 : array of shape (d,), optional
        Prior for ``beta``; zeros if omitted.
    b0 : float, default=0
        Prior shared by every pair bias.
    bp0 : array of shape (s,), optional
        Position bias priors; entry 0 (position 1) must be 0.
    fit_bias : bool, default=True
        When False the model has no pair biases at all (the "nb" variants).
    hash_buckets : int, optional
        If set, pair biases live in a fixed-size hashed table; colliding pairs
        share one cell.
    """

    d: int
    s: int = 4
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    beta0: np.ndarray | None = None
    b0: float = 0.0
    bp0: np.ndarray | None = None
    fit_bias: bool = True
    hash_buckets: int | None = None

    def __post_init__(self):
        if self.d < 1 or self.s < 1:
            raise ContractViolation("d and s must be positive")
        for name in ("lambda1", "lambda2", "lambda3"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")
        beta0 = np.zeros(self.d) if self.beta0 is None else check_vector(self.beta0, self.d, "beta0")
        bp0 = np.zeros(self.s) if self.bp0 is None else check_vector(self.bp0, self.s, "bp0")
        if bp0[0] != 0.0:
            raise ContractViolation("bp0[0] (position 1) must be 0")
        beta0.setflags(write=False)
        bp0.setflags(write=False)
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "bp0", bp0)
        object.__setattr__(self, "b0", float(self.b0))
        if self.hash_buckets is not None and self.hash_buckets < 1:
            raise ContractViolation("hash_buckets must be positive")

    def __eq__(self, other):
        if not isinstance(other, HyperParams):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def replace(self, **changes) -> "HyperParams":
        params = self.to_dict()
        params.update(changes)
        return HyperParams(**params)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "s": self.s,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "beta0": self.beta0.tolist(),
            "b0": self.b0,
            "bp0": self.bp0.tolist(),
            "fit_bias": self.fit_bias,
            "hash_buckets": self.hash_buckets,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HyperParams":
        return cls(**dict(data))


def resolve_key(key: PairKey, hyper: HyperParams) -> PairKey:
    """Map a pair to the key its bias is stored under (identity unless hashing)."""
    if hyper.hash_buckets is None:
        return key
    bucket = zlib.crc32(key.encode().encode("utf-8")) % hyper.hash_buckets
    return PairKey(_BUCKET_QUERY, str(bucket))


@dataclass(frozen=True, eq=False)
class ModelState:
    """Immutable snapshot of a fitted model.

    ``pair_bias`` holds explicit values; any key not present falls back to
    ``hyper.b0``. ``pos_bias[0]`` (position 1) is always 0.
    """

    beta: np.ndarray
    pair_bias: Mapping[PairKey, float]
    pos_bias: np.ndarray
    hyper: HyperParams = field(repr=False)

    def __post_init__(self):
        beta = check_vector(self.beta, self.hyper.d, "beta").copy()
        pos = check_vector(self.pos_bias, self.hyper.s, "pos_bias").copy()
        if pos[0] != 0.0:
            raise ContractViolation("pos_bias[0] (position 1) must be 0")
        biases = {k: float(v) for k, v in self.pair_bias.items()}
        if not all(np.isfinite(v) for v in biases.values()):
            raise ContractViolation("pair biases must be finite")
        beta.setflags(write=False)
        pos.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "pos_bias", pos)
        object.__setattr__(self, "pair_bias", MappingProxyType(biases))

    @classmethod
    def from_priors(cls, hyper: HyperParams) -> "ModelState":
        return cls(hyper.beta0, {}, hyper.bp0, hyper)

    @property
    def d(self) -> int:
        return self.hyper.d

    def bias(self, key: PairKey) -> float:
        if not self.hyper.fit_bias:
            return 0.0
        return self.pair_bias.get(resolve_key(key, self.hyper), self.hyper.b0)

    def scores(self, keys, X: np.ndarray) -> np.ndarray:
        """Vectorized CTR@1 for rows of ``X``."""
        return X @ self.beta + np.array([self.bias(k) for k in keys])

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.hyper.d,
            "beta": self.beta.tolist(),
            "b0": self.hyper.b0,
            "pair_bias": {k.encode(): v for k, v in sorted(self.pair_bias.items(), key=_key_order)},
            "pos_bias": self.pos_bias.tolist(),
            "hyper": self.hyper.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelState":
        hyper = HyperParams.from_dict(data["hyper"])
        if data["d"] != hyper.d or float(data["b0"]) != hyper.b0:
            raise ContractViolation("model header disagrees with its hyperparameters")
        biases = {PairKey.decode(k): float(v) for k, v in data["pair_bias"].items()}
        return cls(np.array(data["beta"], dtype=np.float64), biases,
                   np.array(data["pos_bias"], dtype=np.float64), hyper)

    @classmethod
    def from_json(cls, text: str) -> "ModelState":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelState":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _key_order(item):
    return (item[0].query_id, item[0].doc_id)


def predict_ctr1(state: ModelState, key: PairKey, x) -> float:
    """Predicted CTR@1 of ``key`` with features ``x``: ``beta @ x + bias(key)``."""
    x = check_vector(x, state.d)
    return float(state.beta @ x) + state.bias(key)


def predict_ctr_at_p(state: ModelState, key: PairKey, x, p: int) -> float:
    """Predicted CTR at display position ``p`` (1-indexed)."""
    p = check_position(p, state.hyper.s)
    return predict_ctr1(state, key, x) + float(state.pos_bias[p - 1])
