"""Re-ranking policies: baseline order, batch models, online learners and counting.

Every policy orders the ``s`` candidates of a session by descending score,
breaking ties by the baseline rank, and with probability ``epsilon`` shows a
uniformly random permutation instead. Permutations are 1-indexed tuples:
``perm[i] = k`` means the candidate with base rank ``k`` is displayed at
position ``i + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractViolation
from .model import HyperParams, ModelState, PairKey
from .online import OnlineLearner
from .validation import check_permutation


@dataclass(frozen=True, eq=False)
class Candidate:
    key: PairKey
    x: np.ndarray
    base_rank: int


def _features(candidates: Sequence[Candidate]) -> np.ndarray:
    return np.stack([c.x for c in candidates])


class RerankPolicy:
    """Base class. Subclasses implement :meth:`scores`."""

    kind = "abstract"

    def __init__(self, s: int = 4, epsilon: float = 0.0, rng_seed: int = 0, name: str | None = None):
        if not 0.0 <= epsilon <= 1.0:
            raise ContractViolation("epsilon must lie in [0, 1]")
        self.s = s
        self.epsilon = epsilon
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.name = name or self.kind
        self.last_explored = False

    def scores(self, candidates: Sequence[Candidate], X: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def rank(self, candidates: Sequence[Candidate], X: np.ndarray | None = None) -> tuple[int, ...]:
        """Display order for ``candidates``; ``X`` may pass their stacked features."""
        if len(candidates) != self.s:
            raise ContractViolation(f"expected {self.s} candidates, got {len(candidates)}")
        if self.epsilon > 0.0 and self.rng.random() < self.epsilon:
            self.last_explored = True
            return tuple(int(k) + 1 for k in self.rng.permutation(self.s))
        self.last_explored = False
        sc = self.scores(candidates, X)
        order = sorted(range(self.s), key=lambda i: (-sc[i], candidates[i].base_rank))
        return tuple(candidates[i].base_rank for i in order)

    def feedback(self, candidates: Sequence[Candidate], shown_perm: Sequence[int],
                 clicks: Sequence[int]) -> "RerankPolicy":
        """Learn from a displayed session. Static policies ignore feedback."""
        self._check_feedback(candidates, shown_perm, clicks)
        return self

    def _check_feedback(self, candidates, shown_perm, clicks) -> None:
        check_permutation(shown_perm, len(candidates))
        if len(clicks) != len(shown_perm):
            raise ContractViolation("click vector is not aligned with the displayed permutation")

    @staticmethod
    def _top(candidates: Sequence[Candidate], shown_perm: Sequence[int]) -> Candidate:
        by_rank = {c.base_rank: c for c in candidates}
        return by_rank[shown_perm[0]]


class BaselinePolicy(RerankPolicy):
    """Keeps the engine's order (scores are ``-base_rank``)."""

    kind = "baseline_frmsc"

    def scores(self, candidates, X=None):
        return np.array([-c.base_rank for c in candidates], dtype=np.float64)


class BatchPolicy(RerankPolicy):
    kind = "batch"

    def __init__(self, model: ModelState, **kwargs):
        super().__init__(s=model.hyper.s, **kwargs)
        self.model = model

    def scores(self, candidates, X=None):
        X = _features(candidates) if X is None else X
        return self.model.scores([c.key for c in candidates], X)


class OnlinePolicy(RerankPolicy):
    """Scores with a live learner and feeds it the position-1 click of each session."""

    kind = "online"

    def __init__(self, learner: OnlineLearner, **kwargs):
        super().__init__(s=learner.hyper.s, **kwargs)
        self.learner = learner

    def scores(self, candidates, X=None):
        X = _features(candidates) if X is None else X
        return self.learner.scores([c.key for c in candidates], X)

    def feedback(self, candidates, shown_perm, clicks):
        self._check_feedback(candidates, shown_perm, clicks)
        top = self._top(candidates, shown_perm)
        self.learner.observe(top.key, top.x, int(clicks[0]))
        return self


@dataclass
class CountingState:
    """Position-1 views and clicks per pair plus global totals."""

    views: dict[PairKey, int] = field(default_factory=dict)
    clicks: dict[PairKey, int] = field(default_factory=dict)
    global_views: int = 0
    global_clicks: int = 0

    def record(self, key: PairKey, clicked: int) -> None:
        self.views[key] = self.views.get(key, 0) + 1
        self.global_views += 1
        if clicked:
            self.clicks[key] = self.clicks.get(key, 0) + 1
            self.global_clicks += 1


def counting_score(cs: CountingState, key: PairKey, kappa: float = 1.0) -> float:
    """Smoothed click ratio ``(clicks + kappa * mean) / (views + kappa)``.

    ``mean`` is the global click ratio (0 before any view), so an unseen pair
    scores exactly the global mean.
    """
    mean = cs.global_clicks / cs.global_views if cs.global_views else 0.0
    return (cs.clicks.get(key, 0) + kappa * mean) / (cs.views.get(key, 0) + kappa)


class CountingPolicy(RerankPolicy):
    """Per-pair click/view ratios with no feature generalization."""

    kind = "counting"

    def __init__(self, s: int = 4, kappa: float = 1.0, state: CountingState | None = None, **kwargs):
        super().__init__(s=s, **kwargs)
        self.kappa = kappa
        self.state = state if state is not None else CountingState()

    def scores(self, candidates, X=None):
        return np.array([counting_score(self.state, c.key, self.kappa) for c in candidates])

    def feedback(self, candidates, shown_perm, clicks):
        self._check_feedback(candidates, shown_perm, clicks)
        self.state.record(self._top(candidates, shown_perm).key, int(clicks[0]))
        return self


# -- registry ----------------------------------------------------------------

POLICY_NAMES = (
    "frmsc",
    "batch(b)",
    "batch(nb)",
    "online(b)",
    "online(nb)",
    "online(b,ws)",
    "online(nb,ws)",
    "online(b,ws,w0)",
    "counting",
    "batch(control@1)",
    "batch(control@4,np)",
    "batch(control@4)",
)

# training recipe each policy needs (batch model or warm start)
REQUIRED_MODEL = {
    "batch(b)": "exploration@1",
    "batch(nb)": "exploration@1,nb",
    "online(b,ws)": "exploration@1",
    "online(nb,ws)": "exploration@1,nb",
    "online(b,ws,w0)": "exploration@1",
    "batch(control@1)": "control@1",
    "batch(control@4,np)": "control@4np",
    "batch(control@4)": "control@4",
}


def make_policy(name: str, hyper: HyperParams, models: Mapping[str, ModelState] | None = None,
                epsilon: float = 0.0, rng_seed: int = 0, mode: str = "rank_one") -> RerankPolicy:
    """Build one of the registered policy variants by its stable name.

    ``models`` maps training recipe ids (see ``REQUIRED_MODEL``) to fitted
    batch models. ``hyper`` supplies regularization for online learners.
    """
    if name not in POLICY_NAMES:
        raise ConfigurationError(f"unknown policy {name!r}; known: {', '.join(POLICY_NAMES)}")
    models = models or {}
    recipe = REQUIRED_MODEL.get(name)
    warm = None
    if recipe is not None:
        warm = models.get(recipe)
        if warm is None:
            raise ConfigurationError(f"policy {name!r} needs the {recipe!r} model, which is missing")
    common = dict(epsilon=epsilon, rng_seed=rng_seed, name=name)
    if name == "frmsc":
        return BaselinePolicy(s=hyper.s, **common)
    if name == "counting":
        return CountingPolicy(s=hyper.s, **common)
    if name.startswith("batch("):
        return BatchPolicy(warm, **common)
    fit_bias = "(b" in name
    online_hyper = hyper.replace(fit_bias=fit_bias)
    learner = OnlineLearner(online_hyper, warm=warm, mode=mode, beta_frozen=name.endswith(",w0)"))
    return OnlinePolicy(learner, **common)
