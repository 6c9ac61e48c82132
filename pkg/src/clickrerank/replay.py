"""Offline replay evaluation on uniformly shuffled exploration logs.

A session counts towards a policy's CTR@1 only when the policy's proposed
top document equals the one the log displayed first ("match"). Under
uniform shuffling a match happens with probability ``1/s`` independently of
the policy, which makes ``C / M`` an unbiased estimate of the CTR@1 the
policy would achieve if it served the traffic itself.
"""
from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .exceptions import ContractViolation
from .model import PairKey
from .policy import Candidate, RerankPolicy
from .validation import check_permutation

UNDEFINED = None
IMPRESSION_BUCKETS = ("1", "2", "3-10", "11-100", ">100")
LENGTH_BUCKETS = ("1", "2", "3", "4", ">=5")
METRICS = ("query_ctr", "one_minus_abandonment", "max_rr", "mean_rr", "min_rr")
SIX_HOURS = 6 * 3600


@dataclass(frozen=True, eq=False)
class SessionRecord:
    """One logged search session.

    ``candidates`` are in base-rank order; ``shown_perm[i]`` is the base rank
    of the document displayed at position ``i + 1`` and ``clicks[i]`` the
    click on that position.
    """

    timestamp: int
    query_id: str
    query_length: int
    candidates: tuple[Candidate, ...]
    shown_perm: tuple[int, ...]
    clicks: tuple[int, ...]

    def __post_init__(self):
        s = len(self.candidates)
        check_permutation(self.shown_perm, s)
        if len(self.clicks) != s:
            raise ContractViolation("clicks must have one entry per displayed position")
        if [c.base_rank for c in self.candidates] != list(range(1, s + 1)):
            raise ContractViolation("candidates must be listed in base-rank order 1..s")
        object.__setattr__(self, "X", np.stack([c.x for c in self.candidates]))

    @property
    def s(self) -> int:
        return len(self.candidates)

    def displayed(self, position: int) -> Candidate:
        """Candidate shown at 1-indexed ``position``."""
        return self.candidates[self.shown_perm[position - 1] - 1]

    def to_dict(self) -> dict:
        return {
            "ts": int(self.timestamp),
            "qid": self.query_id,
            "qlen": int(self.query_length),
            "docs": [{"did": c.key.doc_id, "x": c.x.tolist(), "base_rank": c.base_rank}
                     for c in self.candidates],
            "perm": list(self.shown_perm),
            "clicks": list(self.clicks),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SessionRecord":
        qid = data["qid"]
        docs = sorted(data["docs"], key=lambda doc: doc["base_rank"])
        candidates = tuple(Candidate(PairKey(qid, doc["did"]), np.asarray(doc["x"], dtype=np.float64),
                                     int(doc["base_rank"])) for doc in docs)
        return cls(int(data["ts"]), qid, int(data["qlen"]), candidates,
                   tuple(int(k) for k in data["perm"]), tuple(int(c) for c in data["clicks"]))


def impression_bucket(n: int) -> str:
    if n <= 2:
        return str(n)
    if n <= 10:
        return "3-10"
    if n <= 100:
        return "11-100"
    return ">100"


def length_bucket(n: int) -> str:
    return str(n) if n <= 4 else ">=5"


@dataclass
class ReplayReport:
    policy: str
    C: int = 0
    M: int = 0
    sessions_processed: int = 0
    per_metric: dict = field(default_factory=dict)
    per_segment: dict = field(default_factory=dict)
    segment_counts: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    @property
    def ctr1(self) -> float | None:
        return self.C / self.M if self.M else UNDEFINED

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "C": self.C,
            "M": self.M,
            "ctr1": self.ctr1,
            "sessions_processed": self.sessions_processed,
            "per_metric": self.per_metric,
            "per_segment": self.per_segment,
            "segment_counts": self.segment_counts,
            "series": {str(k): v for k, v in sorted(self.series.items())},
        }


def replay(policy: RerankPolicy, log: Iterable[SessionRecord], reveal_interval: float = 300,
           bucket_seconds: int = SIX_HOURS,
           observer: Callable[[str, SessionRecord, object], None] | None = None) -> ReplayReport:
    """Replay ``log`` against ``policy`` and return its report.

    The position-1 click of every session (match or not) is handed to
    ``policy.feedback`` only after the session has been scored, and only in
    batches: feedback time-stamped in ``(kT, (k+1)T]`` is released just
    before the first session later than ``(k+1)T``. ``reveal_interval=0``
    releases it before the very next session.

    ``observer(event, session, payload)``, if given, is called with
    ``("rank", session, perm)`` after each proposal and
    ``("feedback", session, clock)`` when a session's click is released,
    where ``clock`` is the timestamp of the session about to be scored
    (None for the final flush).
    """
    if reveal_interval < 0:
        raise ContractViolation("reveal_interval must be non-negative")
    sessions = list(log)
    impressions = Counter(sess.query_id for sess in sessions)
    report = ReplayReport(policy.name)
    by_imp: dict[str, list[int]] = {b: [0, 0] for b in IMPRESSION_BUCKETS}
    by_len: dict[str, list[int]] = {b: [0, 0] for b in LENGTH_BUCKETS}
    series: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    matched: list[tuple[str, tuple[int, ...]]] = []
    pending: deque[SessionRecord] = deque()

    def due(ts: float) -> float:
        return math.ceil(ts / reveal_interval) * reveal_interval if reveal_interval else ts

    last_ts = -math.inf
    for sess in sessions:
        if sess.timestamp < last_ts:
            raise ContractViolation("log must be sorted by timestamp")
        if sess.s != policy.s:
            raise ContractViolation(f"log has s={sess.s} but the policy expects s={policy.s}")
        last_ts = sess.timestamp
        while pending and (reveal_interval == 0 or due(pending[0].timestamp) < sess.timestamp):
            done = pending.popleft()
            policy.feedback(done.candidates, done.shown_perm, done.clicks)
            if observer:
                observer("feedback", done, sess.timestamp)

        perm = policy.rank(sess.candidates, sess.X)
        if observer:
            observer("rank", sess, perm)
        report.sessions_processed += 1
        bucket = series[int(sess.timestamp // bucket_seconds) * bucket_seconds]
        if perm[0] == sess.shown_perm[0]:
            click = sess.clicks[0]
            report.C += click
            report.M += 1
            for counts in (by_imp[impression_bucket(impressions[sess.query_id])],
                           by_len[length_bucket(sess.query_length)], bucket):
                counts[0] += click
                counts[1] += 1
            matched.append((sess.query_id, sess.clicks))
        pending.append(sess)

    while pending:
        done = pending.popleft()
        policy.feedback(done.candidates, done.shown_perm, done.clicks)
        if observer:
            observer("feedback", done, None)

    report.segment_counts = {"by_impressions": by_imp, "by_query_length": by_len}
    report.series = dict(series)
    report.per_metric = compute_click_metrics(matched)
    return report


def compute_click_metrics(sessions: Iterable[tuple[str, Sequence[int]]]) -> dict:
    """Click metrics over ``(query_id, click_vector)`` pairs.

    RR metrics average over sessions with at least one click; query CTR is
    the mean over queries of the mean number of clicks per session. Returns
    ``None`` for a metric with no data.
    """
    per_query: dict[str, list[float]] = defaultdict(list)
    answered = 0
    n = 0
    rr_max, rr_mean, rr_min = [], [], []
    for qid, clicks in sessions:
        n += 1
        positions = [i + 1 for i, c in enumerate(clicks) if c]
        per_query[qid].append(len(positions))
        if positions:
            answered += 1
            rr_max.append(1.0 / positions[0])
            rr_min.append(1.0 / positions[-1])
            rr_mean.append(float(np.mean([1.0 / p for p in positions])))
    if n == 0:
        return dict.fromkeys(METRICS, UNDEFINED)

    def mean(values):
        return float(np.mean(values)) if values else UNDEFINED

    return {
        "query_ctr": float(np.mean([np.mean(v) for v in per_query.values()])),
        "one_minus_abandonment": answered / n,
        "max_rr": mean(rr_max),
        "mean_rr": mean(rr_mean),
        "min_rr": mean(rr_min),
    }


def segment_report(report: ReplayReport, baseline: ReplayReport,
                   segmentation: str = "by_impressions") -> dict:
    """Per-segment CTR@1 and relative lift over ``baseline``.

    Segments with no matched sessions (for either report) get ``None``.
    """
    if segmentation not in ("by_impressions", "by_query_length"):
        raise ContractViolation(f"unknown segmentation {segmentation!r}")
    mine = report.segment_counts[segmentation]
    base = baseline.segment_counts[segmentation]
    out = {}
    for label, (c, m) in mine.items():
        bc, bm = base[label]
        ctr = c / m if m else UNDEFINED
        bctr = bc / bm if bm else UNDEFINED
        lift = (ctr - bctr) / bctr if ctr is not None and bctr else UNDEFINED
        out[label] = {"ctr1": ctr, "baseline_ctr1": bctr, "lift": lift}
    report.per_segment[segmentation] = out
    return out


def lift(value: float | None, baseline: float | None) -> float | None:
    if value is None or not baseline:
        return UNDEFINED
    return (value - baseline) / baseline


@dataclass
class PositionalCTR:
    """``marginal[k-1, p-1]``: CTR of the base-rank-``k`` document shown at position ``p``.

    ``control[k-1]`` is the CTR of the ``k``-th document at position ``k`` in
    sessions displayed in the original order. NaN marks cells with no data.
    """

    marginal: np.ndarray
    marginal_views: np.ndarray
    control: np.ndarray
    control_views: np.ndarray


def positional_ctr_analysis(log: Iterable[SessionRecord]) -> PositionalCTR:
    clicks = views = ctl_clicks = ctl_views = None
    for sess in log:
        s = sess.s
        if clicks is None:
            clicks, views = np.zeros((s, s)), np.zeros((s, s))
            ctl_clicks, ctl_views = np.zeros(s), np.zeros(s)
        ranks = np.asarray(sess.shown_perm) - 1
        pos = np.arange(s)
        views[ranks, pos] += 1
        clicks[ranks, pos] += sess.clicks
        if np.array_equal(ranks, pos):
            ctl_views += 1
            ctl_clicks += sess.clicks
    if clicks is None:
        empty = np.empty((0, 0))
        return PositionalCTR(empty, empty, np.empty(0), np.empty(0))
    with np.errstate(invalid="ignore", divide="ignore"):
        marginal = np.where(views > 0, clicks / views, np.nan)
        control = np.where(ctl_views > 0, ctl_clicks / ctl_views, np.nan)
    return PositionalCTR(marginal, views, control, ctl_views)


# -- output ------------------------------------------------------------------

def format_table(reports: Sequence[ReplayReport], baseline: str = "frmsc") -> str:
    """Comparison table: CTR@1 and lift over ``baseline`` for each report."""
    base = next((r.ctr1 for r in reports if r.policy == baseline), None)
    width = max([len("algorithm")] + [len(r.policy) for r in reports])
    lines = [f"{'algorithm':<{width}} | {'CTR@1':>8} | {'lift over ' + baseline:>16}",
             "-" * (width + 31)]
    for r in reports:
        ctr = "n/a" if r.ctr1 is None else f"{r.ctr1:.4f}"
        gain = lift(r.ctr1, base)
        gain_text = "n/a" if gain is None else f"{100 * gain:.2f}%"
        lines.append(f"{r.policy:<{width}} | {ctr:>8} | {gain_text:>16}")
    return "\n".join(lines) + "\n"


def write_reports_csv(reports: Sequence[ReplayReport], path, baseline: str = "frmsc") -> None:
    """Flat CSV, one row per policy x metric x segment."""
    base = {r.policy: r for r in reports}.get(baseline)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "metric", "segmentation", "segment", "value", "lift"])
        for r in reports:
            writer.writerow([r.policy, "ctr1", "overall", "all", _fmt(r.ctr1),
                             _fmt(lift(r.ctr1, base.ctr1 if base else None))])
            for metric in METRICS:
                value = r.per_metric.get(metric)
                ref = base.per_metric.get(metric) if base else None
                writer.writerow([r.policy, metric, "overall", "all", _fmt(value), _fmt(lift(value, ref))])
            if base is None:
                continue
            for seg in ("by_impressions", "by_query_length"):
                for label, row in segment_report(r, base, seg).items():
                    writer.writerow([r.policy, "ctr1", seg, label, _fmt(row["ctr1"]), _fmt(row["lift"])])


def write_series_csv(reports: Sequence[ReplayReport], path, bucket_seconds: int = SIX_HOURS) -> None:
    """Instantaneous CTR@1 per time bucket and policy."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "bucket_start", "bucket_seconds", "C", "M", "ctr1"])
        for r in reports:
            for start, (c, m) in sorted(r.series.items()):
                writer.writerow([r.policy, start, bucket_seconds, c, m, _fmt(c / m if m else None)])


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_segments_csv(reports: Sequence[ReplayReport], path, segmentation: str,
                       baseline: str = "frmsc") -> None:
    """CTR@1 and lift per segment for each policy (needs the baseline report)."""
    base = {r.policy: r for r in reports}.get(baseline)
    labels = IMPRESSION_BUCKETS if segmentation == "by_impressions" else LENGTH_BUCKETS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "segment", "C", "M", "ctr1", "lift"])
        for r in reports:
            rows = segment_report(r, base, segmentation) if base else {}
            for label in labels:
                c, m = r.segment_counts[segmentation][label]
                lift_value = rows[label]["lift"] if rows else None
                writer.writerow([r.policy, label, c, m, _fmt(c / m if m else None), _fmt(lift_value)])


def write_click_metrics_csv(reports: Sequence[ReplayReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", *METRICS])
        for r in reports:
            writer.writerow([r.policy, *(_fmt(r.per_metric.get(m)) for m in METRICS)])
