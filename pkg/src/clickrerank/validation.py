"""Input validation helpers.

Thin wrappers around :mod:`sklearn.utils.validation` that raise
:class:`~clickrerank.exceptions.ContractViolation` instead of a bare
``ValueError`` so callers can tell contract breaches from other failures.
"""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ContractViolation


def check_vector(x, d: int, name: str = "x") -> np.ndarray:
    """Return ``x`` as a finite float64 vector of length ``d``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != d:
        raise ContractViolation(f"{name} must have shape ({d},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains NaN or Inf")
    return arr


def check_matrix(X, d: int | None = None, name: str = "X") -> np.ndarray:
    try:
        arr = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=0)
    except ValueError as exc:
        raise ContractViolation(f"{name}: {exc}") from exc
    if d is not None and arr.shape[1] != d:
        raise ContractViolation(f"{name} must have {d} columns, got {arr.shape[1]}")
    return arr


def check_clicks(c, name: str = "clicks") -> np.ndarray:
    arr = np.asarray(c)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ContractViolation(f"{name} must be binary (0/1)")
    return arr.astype(np.int64)


def check_permutation(perm, s: int) -> tuple[int, ...]:
    """Validate a 1-indexed permutation of ``1..s``."""
    perm = tuple(int(k) for k in perm)
    if sorted(perm) != list(range(1, s + 1)):
        raise ContractViolation(f"{perm!r} is not a permutation of 1..{s}")
    return perm


def check_position(p: int, s: int) -> int:
    if not 1 <= int(p) <= s:
        raise ContractViolation(f"position {p} outside [1, {s}]")
    return int(p)
