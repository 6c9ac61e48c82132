from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from clickrerank import (POLICY_NAMES, BaselinePolicy, BatchPolicy, Candidate, ConfigurationError,
                         ContractViolation, CountingPolicy, CountingState, HyperParams, ModelState,
                         OnlineLearner, OnlinePolicy, PairKey, counting_score, make_policy)
from clickrerank.policy import REQUIRED_MODEL


def candidates(s=4, d=2, seed=0, qid="q"):
    rng = np.random.default_rng(seed)
    return tuple(Candidate(PairKey(qid, f"u{k}"), rng.normal(size=d), k) for k in range(1, s + 1))


def model_with_biases(cands, biases, d=2, s=4):
    hyper = HyperParams(d=d, s=s)
    return ModelState(np.zeros(d), {c.key: b for c, b in zip(cands, biases)}, np.zeros(s), hyper)


def test_baseline_is_identity():
    assert BaselinePolicy(s=4).rank(candidates()) == (1, 2, 3, 4)


def test_batch_argmax_first():
    cands = candidates()
    policy = BatchPolicy(model_with_biases(cands, [0.1, 0.9, 0.3, 0.2]))
    assert policy.rank(cands) == (2, 3, 4, 1)


def test_ties_broken_by_base_rank():
    cands = candidates()
    policy = BatchPolicy(model_with_biases(cands, [0.5, 0.7, 0.7, 0.5]))
    assert policy.rank(cands) == (2, 3, 1, 4)


def test_epsilon_one_uniform_over_permutations():
    policy = BaselinePolicy(s=3, epsilon=1.0, rng_seed=7)
    cands = candidates(s=3)
    counts = Counter(policy.rank(cands) for _ in range(100_000))
    assert len(counts) == 6
    assert chisquare(list(counts.values())).pvalue > 0.01


def test_epsilon_mixture_fraction():
    eps, n = 0.3, 20_000
    policy = BaselinePolicy(s=4, epsilon=eps, rng_seed=1)
    cands = candidates()
    explored = 0
    for _ in range(n):
        policy.rank(cands)
        explored += policy.last_explored
    assert abs(explored / n - eps) <= 3 * np.sqrt(eps * (1 - eps) / n)


def test_epsilon_contract():
    with pytest.raises(ContractViolation):
        BaselinePolicy(epsilon=1.5)


def test_wrong_candidate_count():
    with pytest.raises(ContractViolation):
        BaselinePolicy(s=4).rank(candidates(s=3))


def test_determinism_given_seed():
    cands = candidates()
    a = BaselinePolicy(s=4, epsilon=0.5, rng_seed=99)
    b = BaselinePolicy(s=4, epsilon=0.5, rng_seed=99)
    assert [a.rank(cands) for _ in range(500)] == [b.rank(cands) for _ in range(500)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4), st.floats(0.01, 100))
def test_scale_invariance(biases, scale):
    cands = candidates()
    base = BatchPolicy(model_with_biases(cands, biases)).rank(cands)
    scaled = BatchPolicy(model_with_biases(cands, [scale * b for b in biases])).rank(cands)
    if len(set(biases)) == len(biases) and len({scale * b for b in biases}) == len(biases):
        assert base == scaled


def test_counting_score_examples():
    key = PairKey("q", "u")
    cs = CountingState(views={key: 3}, clicks={key: 1}, global_views=10, global_clicks=2)
    assert counting_score(cs, key) == pytest.approx(1.2 / 4)
    assert counting_score(CountingState(), key) == 0.0
    cs = CountingState(global_views=4, global_clicks=1)
    assert counting_score(cs, PairKey("q", "new")) == 0.25


def test_counting_feedback_uses_position_one_only():
    cands = candidates()
    policy = CountingPolicy(s=4)
    policy.feedback(cands, (3, 1, 2, 4), (1, 1, 0, 1))
    state = policy.state
    top = cands[2].key
    assert state.views == {top: 1} and state.clicks == {top: 1}
    assert (state.global_views, state.global_clicks) == (1, 1)
    policy.feedback(cands, (3, 1, 2, 4), (0, 1, 1, 1))
    assert state.views[top] == 2 and state.clicks[top] == 1


def test_counting_ranks_by_ratio():
    cands = candidates()
    policy = CountingPolicy(s=4)
    for _ in range(5):
        policy.feedback(cands, (4, 1, 2, 3), (1, 0, 0, 0))
        policy.feedback(cands, (1, 2, 3, 4), (0, 0, 0, 0))
    assert policy.rank(cands)[0] == 4


def test_batch_feedback_is_noop():
    cands = candidates()
    model = model_with_biases(cands, [0.1, 0.2, 0.3, 0.4])
    policy = BatchPolicy(model)
    before = policy.rank(cands)
    policy.feedback(cands, (1, 2, 3, 4), (1, 1, 1, 1))
    assert policy.model is model and policy.rank(cands) == before


def test_online_policy_matches_bare_learner():
    rng = np.random.default_rng(3)
    hyper = HyperParams(d=2)
    policy = OnlinePolicy(OnlineLearner(hyper))
    bare = OnlineLearner(hyper)
    for i in range(50):
        cands = candidates(seed=i, qid=f"q{i % 4}")
        perm = tuple(int(k) + 1 for k in rng.permutation(4))
        clicks = tuple(int(c) for c in rng.integers(0, 2, size=4))
        policy.feedback(cands, perm, clicks)
        top = cands[perm[0] - 1]
        bare.observe(top.key, top.x, clicks[0])
    assert policy.learner.current_model().to_json() == bare.current_model().to_json()


def test_misaligned_feedback():
    cands = candidates()
    for policy in (BaselinePolicy(), CountingPolicy(), OnlinePolicy(OnlineLearner(HyperParams(d=2)))):
        with pytest.raises(ContractViolation):
            policy.feedback(cands, (1, 2, 3, 4), (1, 0))
        with pytest.raises(ContractViolation):
            policy.feedback(cands, (1, 1, 3, 4), (1, 0, 0, 0))


def test_registry_names():
    assert POLICY_NAMES == ("frmsc", "batch(b)", "batch(nb)", "online(b)", "online(nb)", "online(b,ws)",
                            "online(nb,ws)", "online(b,ws,w0)", "counting", "batch(control@1)",
                            "batch(control@4,np)", "batch(control@4)")


def test_make_policy_variants():
    hyper = HyperParams(d=2)
    models = {r: ModelState.from_priors(hyper) for r in set(REQUIRED_MODEL.values())}
    built = {name: make_policy(name, hyper, models) for name in POLICY_NAMES}
    assert built["frmsc"].kind == "baseline_frmsc"
    assert built["counting"].kind == "counting"
    assert built["batch(b)"].kind == "batch"
    assert built["online(b)"].learner.hyper.fit_bias
    assert not built["online(nb)"].learner.hyper.fit_bias
    assert not built["online(nb,ws)"].learner.hyper.fit_bias
    assert built["online(b,ws,w0)"].learner.beta_frozen
    assert not built["online(b,ws)"].learner.beta_frozen
    assert all(p.name == n for n, p in built.items())


def test_make_policy_errors():
    hyper = HyperParams(d=2)
    with pytest.raises(ConfigurationError, match="online\\(b,ws\\)"):
        make_policy("online(b,ws)", hyper, {})
    with pytest.raises(ConfigurationError):
        make_policy("bandit", hyper)
