"""Synthetic exploration and control logs with a known click model.

Each query has ``s`` candidate documents with standard-normal features. The
true CTR@1 of a pair is ``clip(sigmoid(w . x + offset + noise), 0.01, 0.99)``,
optionally overridden from some time on by drift events. A click at display
position ``p`` is Bernoulli(``ctr1 * p ** -gamma``), independent across
positions. Query popularity follows a Zipf law.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import permutations
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import ContractViolation
from .model import PairKey
from .policy import Candidate, RerankPolicy
from .replay import SessionRecord

CTR_FLOOR, CTR_CEIL = 0.01, 0.99


@dataclass
class WorldSpec:
    """Parameters of a synthetic search world.

    ``drift_events`` are ``(query_id, base_rank, start_time, new_ctr)``:
    from ``start_time`` on the document with that base rank has true CTR@1
    ``new_ctr``. ``weight_shifts`` are ``(start_time, delta)`` steps added to
    the true weights, modelling a population-wide change in what users click.
    ``traffic_bursts`` are ``(query_id, start_time, end_time, n_sessions)``:
    extra sessions of one query spread uniformly over ``[start, end)``, on top
    of the Zipf traffic (a breaking-news spike).
    When ``n_sessions`` is None the session count is
    ``round(horizon * sessions_per_second)``. With ``intercept_feature`` the
    first feature is the constant 1 (its true weight is ignored; the level is
    set by ``logit_offset``).
    """

    n_queries: int = 2000
    zipf_exponent: float = 1.1
    d: int = 8
    s: int = 4
    true_weights: list[float] | None = None
    weight_scale: float = 1.5
    logit_offset: float = -0.5
    pair_noise_sd: float = 0.8
    base_rank_noise_sd: float = 2.5
    position_gamma: float = 0.9
    drift_events: list = field(default_factory=list)
    weight_shifts: list = field(default_factory=list)
    traffic_bursts: list = field(default_factory=list)
    horizon: int = 6 * 86400
    sessions_per_second: float = 40000 / (6 * 86400)
    n_sessions: int | None = None
    max_query_length: int = 8
    intercept_feature: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1 or self.d < 1 or self.s < 1:
            raise ContractViolation("n_queries, d and s must be positive")
        if self.zipf_exponent <= 0 or self.pair_noise_sd < 0 or self.position_gamma < 0:
            raise ContractViolation("invalid zipf_exponent, pair_noise_sd or position_gamma")
        if self.horizon <= 0:
            raise ContractViolation("horizon must be positive")

    @property
    def session_count(self) -> int:
        if self.n_sessions is not None:
            return int(self.n_sessions)
        return int(round(self.horizon * self.sessions_per_second))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "WorldSpec":
        return cls(**dict(data))


def query_id(i: int) -> str:
    return f"q{i:05d}"


class World:
    """Ground truth produced by :func:`generate_world`."""

    def __init__(self, spec: WorldSpec, popularity, features, pair_noise, weights,
                 query_lengths, base_order):
        self.spec = spec
        self.popularity = popularity            # (Q,)
        self.features = features                # (Q, s, d), docs in base-rank order
        self.pair_noise = pair_noise            # (Q, s)
        self.weights = weights                  # (d,)
        self.query_lengths = query_lengths      # (Q,)
        self.base_order = base_order            # original doc index per base rank
        self.query_ids = [query_id(i) for i in range(spec.n_queries)]
        self._qindex = {q: i for i, q in enumerate(self.query_ids)}
        self.candidates = [
            tuple(Candidate(PairKey(qid, f"{qid}-u{base_order[i, k]}"), features[i, k], k + 1)
                  for k in range(spec.s))
            for i, qid in enumerate(self.query_ids)
        ]
        shifts = sorted(((int(t), np.asarray(delta, dtype=np.float64)) for t, delta in spec.weight_shifts),
                        key=lambda item: item[0])
        self._epoch_starts = np.array([t for t, _ in shifts], dtype=np.int64)
        epoch_weights = [weights]
        for _, delta in shifts:
            epoch_weights.append(epoch_weights[-1] + delta)
        self._epoch_ctr = np.stack([
            np.clip(expit(features @ w + spec.logit_offset + pair_noise), CTR_FLOOR, CTR_CEIL)
            for w in epoch_weights])   # (E, Q, s)
        self._drift = sorted(((self._qindex[q], int(k) - 1, int(t0), float(v))
                              for q, k, t0, v in spec.drift_events), key=lambda e: e[2])

    def qindex(self, qid: str) -> int:
        return self._qindex[qid]

    def true_ctr_matrix(self, qidx: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """True CTR@1 of every candidate, shape ``(n, s)``, for sessions at ``ts``."""
        qidx = np.asarray(qidx)
        ts = np.asarray(ts)
        epoch = np.searchsorted(self._epoch_starts, ts, side="right")
        ctr = self._epoch_ctr[epoch, qidx].copy()
        for q, k, t0, v in self._drift:
            ctr[(qidx == q) & (ts >= t0), k] = v
        return ctr

    def true_ctr1(self, qid: str, base_rank: int, t: float) -> float:
        return float(self.true_ctr_matrix([self.qindex(qid)], [t])[0, base_rank - 1])

    def change_points(self) -> list[int]:
        return sorted({int(t) for t in self._epoch_starts} | {t0 for _, _, t0, _ in self._drift})

    def expected_ctr1(self, choose: Callable[[int], int], t_start: int = 0, t_end: int | None = None) -> float:
        """Exact expected CTR@1 of a static policy over integer times in ``[t_start, t_end)``.

        ``choose(qidx)`` returns the 0-based base-rank index the policy puts
        first for that query. Queries are weighted by popularity and times
        uniformly, matching the log generator.
        """
        if self.spec.traffic_bursts:
            raise ContractViolation("expected_ctr1 assumes pure Zipf traffic; the world has bursts")
        t_end = self.spec.horizon if t_end is None else t_end
        top = np.array([choose(q) for q in range(self.spec.n_queries)])
        cuts = [t_start] + [t for t in self.change_points() if t_start < t < t_end] + [t_end]
        total = 0.0
        all_q = np.arange(self.spec.n_queries)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            ctr = self.true_ctr_matrix(all_q, np.full(all_q.shape, lo))
            total += (hi - lo) * float(self.popularity @ ctr[all_q, top])
        return total / (t_end - t_start)

    def policy_top_choice(self, policy: RerankPolicy) -> Callable[[int], int]:
        """Adapter turning a static policy into a ``choose`` function."""
        return lambda q: policy.rank(self.candidates[q])[0] - 1


def zipf_popularity(n_queries: int, exponent: float) -> np.ndarray:
    weights = np.arange(1, n_queries + 1, dtype=np.float64) ** -exponent
    return weights / weights.sum()


def generate_world(spec: WorldSpec) -> World:
    """Draw features, true CTRs and baseline ranks; deterministic given ``spec.rng_seed``."""
    rng = np.random.default_rng([spec.rng_seed, 0])
    Q, s, d = spec.n_queries, spec.s, spec.d
    if spec.true_weights is not None:
        weights = np.asarray(spec.true_weights, dtype=np.float64)
        if weights.shape != (d,):
            raise ContractViolation(f"true_weights must have length {d}")
    else:
        weights = rng.normal(size=d)
        weights *= spec.weight_scale / np.linalg.norm(weights)
    features = rng.normal(size=(Q, s, d))
    if spec.intercept_feature:
        features[:, :, 0] = 1.0
        weights = weights.copy()
        weights[0] = 0.0
    pair_noise = rng.normal(scale=spec.pair_noise_sd, size=(Q, s)) if spec.pair_noise_sd else np.zeros((Q, s))
    logits = features @ weights + spec.logit_offset + pair_noise
    # the baseline ranker sees a noisy version of the initial relevance
    noisy = logits + rng.normal(scale=spec.base_rank_noise_sd, size=(Q, s))
    order = np.argsort(-noisy, axis=1, kind="stable")
    rows = np.arange(Q)[:, None]
    query_lengths = np.minimum(1 + rng.poisson(1.6, size=Q), spec.max_query_length)
    return World(spec, zipf_popularity(Q, spec.zipf_exponent), features[rows, order],
                 pair_noise[rows, order], weights, query_lengths, order)


def _sessions(world: World, rng: np.random.Generator, shuffle: bool,
              with_truth: bool = False) -> list[SessionRecord] | tuple[list[SessionRecord], np.ndarray]:
    spec = world.spec
    n, s = spec.session_count, spec.s
    ts = np.sort(rng.integers(0, spec.horizon, size=n))
    qidx = rng.choice(spec.n_queries, size=n, p=world.popularity)
    if spec.traffic_bursts:
        extra_ts, extra_q = [ts], [qidx]
        for qid, t_lo, t_hi, count in spec.traffic_bursts:
            extra_ts.append(rng.integers(int(t_lo), int(t_hi), size=int(count)))
            extra_q.append(np.full(int(count), world.qindex(qid)))
        ts, qidx = np.concatenate(extra_ts), np.concatenate(extra_q)
        order = np.argsort(ts, kind="stable")
        ts, qidx = ts[order], qidx[order]
        n = len(ts)
    if shuffle:
        perm0 = rng.permuted(np.tile(np.arange(s), (n, 1)), axis=1)
    else:
        perm0 = np.tile(np.arange(s), (n, 1))
    ctr = world.true_ctr_matrix(qidx, ts)
    factor = np.arange(1, s + 1, dtype=np.float64) ** -spec.position_gamma
    shown_ctr = np.take_along_axis(ctr, perm0, axis=1) * factor
    clicks = (rng.random((n, s)) < shown_ctr).astype(np.int64)
    records = [
        SessionRecord(int(ts[i]), world.query_ids[q], int(world.query_lengths[q]), world.candidates[q],
                      tuple((perm0[i] + 1).tolist()), tuple(clicks[i].tolist()))
        for i, q in enumerate(qidx.tolist())
    ]
    if with_truth:
        return records, ctr
    return records


def generate_exploration_log(world: World, seed: int | None = None, with_truth: bool = False):
    """Sessions whose top ``s`` results are uniformly shuffled."""
    seed = world.spec.rng_seed if seed is None else seed
    return _sessions(world, np.random.default_rng([seed, 1]), shuffle=True, with_truth=with_truth)


def generate_control_log(world: World, seed: int | None = None, with_truth: bool = False):
    """Sessions always displayed in baseline order (position-confounded clicks)."""
    seed = world.spec.rng_seed if seed is None else seed
    return _sessions(world, np.random.default_rng([seed, 2]), shuffle=False, with_truth=with_truth)


def all_permutations(s: int) -> list[tuple[int, ...]]:
    return [tuple(k + 1 for k in p) for p in permutations(range(s))]


# -- JSON Lines I/O ------------------------------------------------------------

def write_log(records: Iterable[SessionRecord], path, truth: np.ndarray | None = None) -> int:
    """Write sessions as JSON Lines; with ``truth`` each line also carries ``true_ctr1``."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for i, rec in enumerate(records):
            row = rec.to_dict()
            if truth is not None:
                row["true_ctr1"] = truth[i].tolist()
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_log(path) -> Iterator[SessionRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield SessionRecord.from_dict(json.loads(line))


def read_log(path) -> list[SessionRecord]:
    return list(iter_log(path))


def split_log(records: Sequence[SessionRecord], split_ts: int) -> tuple[list[SessionRecord], list[SessionRecord]]:
    """Sessions before ``split_ts`` (training) and from ``split_ts`` on (test)."""
    train = [r for r in records if r.timestamp < split_ts]
    test = [r for r in records if r.timestamp >= split_ts]
    return train, test


def drift_world_spec(seed: int = 0, n_drift_queries: int = 10, drift_ctr: float = 0.9,
                     weight_shift: float = 0.7, drift_window: tuple[float, float] = (0.55, 0.8),
                     **overrides) -> WorldSpec:
    """Default world with relevance drift in the second half of the horizon.

    The ``n_drift_queries`` most popular queries each see their lowest-ranked
    document jump to CTR@1 ``drift_ctr`` at a time drawn uniformly from
    ``drift_window`` (fractions of the horizon). ``weight_shift`` > 0 also
    moves the true weights at mid-horizon by a random vector of that
    relative norm, so the shared coefficients learned earlier go stale.
    """
    spec = WorldSpec(rng_seed=seed, **overrides)
    rng = np.random.default_rng([seed, 7])
    if spec.true_weights is None:
        w = rng.normal(size=spec.d)
        if spec.intercept_feature:
            w[0] = 0.0
        spec.true_weights = (w * spec.weight_scale / np.linalg.norm(w)).tolist()
    lo, hi = drift_window
    starts = rng.integers(int(lo * spec.horizon), int(hi * spec.horizon), size=n_drift_queries)
    spec.drift_events = [[query_id(i), spec.s, int(t0), drift_ctr]
                         for i, t0 in zip(range(min(n_drift_queries, spec.n_queries)), starts)]
    if weight_shift > 0:
        delta = rng.normal(size=spec.d)
        if spec.intercept_feature:
            delta[0] = 0.0
        delta *= weight_shift * np.linalg.norm(spec.true_weights) / np.linalg.norm(delta)
        spec.weight_shifts = [[spec.horizon // 2, delta.tolist()]]
    return spec


def news_burst_spec(seed: int = 0, first_candidate: int = 300, onset_fraction: float = 0.7,
                    burst_hours: int = 12, sessions_per_hour: int = 200, drift_ctr: float = 0.95,
                    max_initial_ctr: float = 0.5, **overrides) -> tuple[WorldSpec, str, int, int]:
    """Drift world plus a scripted breaking-news query.

    Picks the first query at or after popularity rank ``first_candidate``
    whose documents all have CTR@1 <= ``max_initial_ctr`` just before the
    onset and whose lowest-ranked document is not already the best. At the onset
    its lowest-ranked document jumps to ``drift_ctr`` and the query receives
    ``sessions_per_hour`` extra sessions for ``burst_hours``, after which it
    falls back to its (tiny) Zipf traffic.

    Returns ``(spec, query_id, onset, burst_end)``.
    """
    spec = drift_world_spec(seed, **overrides)
    world = generate_world(spec)
    onset = int(onset_fraction * spec.horizon)
    initial = world.true_ctr_matrix(np.arange(spec.n_queries), np.full(spec.n_queries, onset - 1))
    # skip queries already drifting
    busy = {q for q, *_ in spec.drift_events}
    for q in range(first_candidate, spec.n_queries):
        qid = query_id(q)
        ctr = initial[q]
        if qid not in busy and ctr.max() <= max_initial_ctr and ctr[-1] < ctr.max():
            break
    else:
        raise ContractViolation("no query satisfies the case-study constraints")
    end = onset + burst_hours * 3600
    spec.drift_events = spec.drift_events + [[qid, spec.s, onset, drift_ctr]]
    spec.traffic_bursts = spec.traffic_bursts + [[qid, onset, end, burst_hours * sessions_per_hour]]
    return spec, qid, onset, end
