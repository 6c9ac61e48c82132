import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickrerank import (BaselinePolicy, BatchPolicy, Candidate, ContractViolation, HyperParams, ModelState,
                         OnlineLearner, OnlinePolicy, PairKey, SessionRecord, compute_click_metrics,
                         positional_ctr_analysis, replay, segment_report)
from clickrerank.policy import RerankPolicy
from clickrerank.replay import (IMPRESSION_BUCKETS, ReplayReport, format_table, impression_bucket, length_bucket,
                                write_click_metrics_csv, write_reports_csv, write_segments_csv)
from clickrerank.simlog import WorldSpec, generate_exploration_log, generate_world


def cands(qid, s=2, d=1):
    return tuple(Candidate(PairKey(qid, f"{qid}-{k}"), np.full(d, float(k)), k) for k in range(1, s + 1))


def session(ts, perm, clicks, qid="q", qlen=1):
    return SessionRecord(ts, qid, qlen, cands(qid, len(perm)), tuple(perm), tuple(clicks))


class FavoritePolicy(RerankPolicy):
    """Always puts the document with a fixed base rank first."""

    kind = "favorite"

    def __init__(self, favorite, s=2):
        super().__init__(s=s)
        self.favorite = favorite

    def scores(self, candidates, X=None):
        return np.array([1.0 if c.base_rank == self.favorite else 0.0 for c in candidates])


class RecordingPolicy(BaselinePolicy):
    def __init__(self, s=2):
        super().__init__(s=s)
        self.seen = []

    def feedback(self, candidates, shown_perm, clicks):
        self.seen.append((candidates[0].key.query_id, tuple(shown_perm), tuple(clicks)))
        return super().feedback(candidates, shown_perm, clicks)


def test_hand_trace():
    # doc A = base rank 1 shown first in sessions 1 and 3 (clicks 1 and 0)
    log = [session(0, (1, 2), (1, 0)), session(10, (2, 1), (1, 1)),
           session(20, (1, 2), (0, 1)), session(30, (2, 1), (0, 0))]
    report = replay(FavoritePolicy(1), log)
    assert (report.M, report.C, report.ctr1) == (2, 1, 0.5)
    assert report.sessions_processed == 4


def test_always_match_policy():
    rng = np.random.default_rng(0)
    log = [session(i, (1, 2), tuple(rng.integers(0, 2, size=2))) for i in range(50)]
    report = replay(FavoritePolicy(1), log)
    assert report.M == 50
    assert report.C == sum(s.clicks[0] for s in log)


def test_match_rate_binomial():
    spec = WorldSpec(n_queries=100, d=3, n_sessions=8000, rng_seed=1)
    log = generate_exploration_log(generate_world(spec))
    for policy in (BaselinePolicy(s=4), FavoritePolicy(3, s=4)):
        report = replay(policy, log)
        L, p = len(log), 1 / 4
        assert abs(report.M / L - p) <= 3 * math.sqrt(p * (1 - p) / L)
        assert 0 <= report.C <= report.M <= report.sessions_processed


def test_every_session_feeds_back_position_one():
    log = [session(i * 400, (1 + i % 2, 2 - i % 2), (i % 3 == 0, 1)) for i in range(6)]
    policy = RecordingPolicy()
    replay(policy, log, reveal_interval=300)
    assert [p for _, p, _ in policy.seen] == [s.shown_perm for s in log]
    assert [c for _, _, c in policy.seen] == [s.clicks for s in log]


def test_delayed_reveal_boundaries():
    rng = np.random.default_rng(2)
    ts = np.sort(rng.integers(0, 5000, size=400))
    log = [session(int(t), (1, 2) if rng.random() < 0.5 else (2, 1), (int(rng.random() < 0.4), 0)) for t in ts]
    T = 300
    events = []
    replay(BaselinePolicy(s=2), log, reveal_interval=T, observer=lambda e, s, p: events.append((e, s, p)))
    ranked, released = set(), set()
    for event, sess, payload in events:
        if event == "rank":
            # everything due strictly before this session has already been released
            for other in log:
                if id(other) in ranked and math.ceil(other.timestamp / T) * T < sess.timestamp:
                    assert id(other) in released
            ranked.add(id(sess))
        else:
            # scored first, and never revealed before its interval closes
            assert id(sess) in ranked
            if payload is not None:
                assert math.ceil(sess.timestamp / T) * T < payload
            released.add(id(sess))
    assert len(released) == len(log)


def test_zero_interval_reveals_before_next_session():
    log = [session(t, (1, 2), (1, 0)) for t in (0, 0, 1, 5)]
    events = []
    replay(BaselinePolicy(s=2), log, reveal_interval=0, observer=lambda e, s, p: events.append((e, s.timestamp)))
    assert [e for e, _ in events] == ["rank", "feedback", "rank", "feedback", "rank", "feedback", "rank",
                                      "feedback"]


def test_learner_never_sees_click_before_scoring():
    # sessions at t = 1..200 with T = 60: nothing may be revealed before t = 61
    log = [session(i, (2, 1), (1, 0)) for i in range(1, 201)]
    hyper = HyperParams(d=1, s=2)
    events = []
    policy = OnlinePolicy(OnlineLearner(hyper))
    replay(policy, log, reveal_interval=60, observer=lambda e, s, p: events.append((e, s.timestamp, p)))
    first_feedback = next(i for i, e in enumerate(events) if e[0] == "feedback")
    assert all(e[0] == "rank" for e in events[:first_feedback])
    assert events[first_feedback][2] == 61


def test_replay_contracts():
    with pytest.raises(ContractViolation):
        replay(BaselinePolicy(s=2), [session(5, (1, 2), (0, 0)), session(4, (1, 2), (0, 0))])
    with pytest.raises(ContractViolation):
        replay(BaselinePolicy(s=4), [session(0, (1, 2), (0, 0))])
    with pytest.raises(ContractViolation):
        replay(BaselinePolicy(s=2), [], reveal_interval=-1)


def test_session_record_contracts():
    with pytest.raises(ContractViolation):
        session(0, (1, 1), (0, 0))
    with pytest.raises(ContractViolation):
        session(0, (1, 2), (0,))
    with pytest.raises(ContractViolation):
        SessionRecord(0, "q", 1, tuple(reversed(cands("q"))), (1, 2), (0, 0))


def test_session_record_json_round_trip():
    rec = session(17, (2, 1), (0, 1), qlen=3)
    back = SessionRecord.from_dict(rec.to_dict())
    assert back.to_dict() == rec.to_dict()
    assert rec.to_dict()["perm"] == [2, 1]


# -- metrics -------------------------------------------------------------------

def test_metrics_top_click_only():
    m = compute_click_metrics([("q", (1, 0, 0, 0))])
    assert m["max_rr"] == m["mean_rr"] == m["min_rr"] == 1.0
    assert m["one_minus_abandonment"] == 1.0


def test_metrics_clicks_two_and_four():
    m = compute_click_metrics([("q", (0, 1, 0, 1))])
    assert m["max_rr"] == 0.5
    assert m["min_rr"] == 0.25
    assert m["mean_rr"] == pytest.approx(3 / 8)
    assert m["query_ctr"] == 2.0


def test_metrics_abandoned_session():
    m = compute_click_metrics([("q", (0, 0, 0, 0)), ("r", (1, 0, 0, 0))])
    assert m["one_minus_abandonment"] == 0.5
    assert m["max_rr"] == 1.0
    assert m["query_ctr"] == 0.5


def test_metrics_query_ctr_averages_per_query():
    m = compute_click_metrics([("a", (1, 1)), ("a", (0, 0)), ("b", (1, 0))])
    assert m["query_ctr"] == pytest.approx((1.0 + 1.0) / 2)


def test_metrics_undefined_without_matches():
    assert compute_click_metrics([]) == dict.fromkeys(
        ["query_ctr", "one_minus_abandonment", "max_rr", "mean_rr", "min_rr"], None)
    report = replay(BaselinePolicy(s=2), [])
    assert report.ctr1 is None and report.per_metric["max_rr"] is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.lists(st.integers(0, 1), min_size=4, max_size=4)),
                min_size=1, max_size=30))
def test_metric_bounds(sessions):
    m = compute_click_metrics(sessions)
    if m["max_rr"] is not None:
        for key in ("max_rr", "mean_rr", "min_rr"):
            assert 0 < m[key] <= 1
        assert m["max_rr"] >= m["mean_rr"] - 1e-12 >= m["min_rr"] - 2e-12
    assert 0 <= m["one_minus_abandonment"] <= 1


# -- segments --------------------------------------------------------------------

def test_bucket_labels():
    assert [impression_bucket(n) for n in (1, 2, 3, 10, 11, 100, 101)] == \
        ["1", "2", "3-10", "3-10", "11-100", "11-100", ">100"]
    assert [length_bucket(n) for n in (1, 2, 3, 4, 5, 9)] == ["1", "2", "3", "4", ">=5", ">=5"]


def test_self_lift_is_zero():
    spec = WorldSpec(n_queries=50, d=2, n_sessions=3000, rng_seed=2)
    log = generate_exploration_log(generate_world(spec))
    a = replay(BaselinePolicy(s=4), log)
    out = segment_report(a, a, "by_impressions")
    assert all(row["lift"] in (0.0, None) for row in out.values())
    assert any(row["lift"] == 0.0 for row in out.values())


def test_segment_lift_ratio():
    mine, base = ReplayReport("p"), ReplayReport("frmsc")
    mine.segment_counts = {"by_impressions": {b: [0, 0] for b in IMPRESSION_BUCKETS}}
    base.segment_counts = {"by_impressions": {b: [0, 0] for b in IMPRESSION_BUCKETS}}
    mine.segment_counts["by_impressions"]["2"] = [9, 10]
    base.segment_counts["by_impressions"]["2"] = [3, 4]
    out = segment_report(mine, base)
    assert out["2"]["lift"] == pytest.approx(0.2)
    assert out["1"]["ctr1"] is None and out["1"]["lift"] is None


def test_single_impression_queries_fill_one_bucket():
    log = [session(i, (1, 2), (1, 0), qid=f"q{i}") for i in range(20)]
    report = replay(BaselinePolicy(s=2), log)
    out = segment_report(report, report, "by_impressions")
    assert out["1"]["ctr1"] == 1.0
    assert all(out[b]["ctr1"] is None for b in IMPRESSION_BUCKETS[1:])
    with pytest.raises(ContractViolation):
        segment_report(report, report, "by_weekday")


# -- positional analysis -----------------------------------------------------------

def test_positional_no_bias_is_flat():
    spec = WorldSpec(n_queries=3, d=2, n_sessions=60000, position_gamma=0.0, rng_seed=4)
    log = generate_exploration_log(generate_world(spec))
    table = positional_ctr_analysis(log)
    se = np.sqrt(table.marginal * (1 - table.marginal) / table.marginal_views)
    # each row (a base rank) is flat across positions up to sampling noise
    for k in range(4):
        row, row_se = table.marginal[k], se[k]
        assert np.all(np.abs(row - row.mean()) <= 4 * np.sqrt(row_se ** 2 + (row_se ** 2).mean() / 4))


def test_positional_identity_only_log_fills_diagonal():
    log = [session(i, (1, 2, 3), (1, 0, 1)) for i in range(10)]
    table = positional_ctr_analysis(log)
    assert np.all(np.isnan(table.marginal[~np.eye(3, dtype=bool)]))
    np.testing.assert_array_equal(np.diag(table.marginal), [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(table.control, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(table.control_views, [10, 10, 10])


def test_positional_empty_log():
    assert positional_ctr_analysis([]).marginal.size == 0


# -- outputs --------------------------------------------------------------------

def test_single_row_table():
    log = [session(i, (1, 2), (1, 0)) for i in range(4)]
    text = format_table([replay(BaselinePolicy(s=2, name="frmsc"), log)])
    rows = text.strip().splitlines()
    assert len(rows) == 3 and rows[2].split("|")[2].strip() == "0.00%"


def test_csv_outputs(tmp_path):
    log = [session(i * 100, (1 + i % 2, 2 - i % 2), (i % 2, 0), qid=f"q{i % 3}", qlen=1 + i % 6)
           for i in range(40)]
    reports = [replay(BaselinePolicy(s=2, name="frmsc"), log), replay(FavoritePolicy(2), log)]
    write_reports_csv(reports, tmp_path / "r.csv")
    write_segments_csv(reports, tmp_path / "s.csv", "by_query_length")
    write_click_metrics_csv(reports, tmp_path / "m.csv")
    with open(tmp_path / "r.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["policy"] == "frmsc" and rows[0]["metric"] == "ctr1"
    assert {r["segmentation"] for r in rows} == {"overall", "by_impressions", "by_query_length"}
    with open(tmp_path / "s.csv", encoding="utf-8") as fh:
        seg = list(csv.DictReader(fh))
    assert len(seg) == 10
    with open(tmp_path / "m.csv", encoding="utf-8") as fh:
        assert next(csv.reader(fh)) == ["policy", "query_ctr", "one_minus_abandonment", "max_rr", "mean_rr",
                                        "min_rr"]
