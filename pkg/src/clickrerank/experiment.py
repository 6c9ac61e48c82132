"""Training recipes and end-to-end experiment runs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .batch import SufficientStats, TrainingExample, solve, solve_with_positions
from .exceptions import ConfigurationError
from .model import HyperParams, ModelState
from .policy import POLICY_NAMES, REQUIRED_MODEL, make_policy
from .replay import ReplayReport, SessionRecord, replay
from .simlog import World, WorldSpec, generate_control_log, generate_exploration_log, generate_world, split_log

log = logging.getLogger(__name__)

RECIPES = ("exploration@1", "exploration@1,nb", "control@1", "control@4", "control@4np")
MODEL_FILES = {
    "exploration@1": "model_exploration1_b.json",
    "exploration@1,nb": "model_exploration1_nb.json",
    "control@1": "model_control1.json",
    "control@4": "model_control4.json",
    "control@4np": "model_control4np.json",
}


def position1_examples(log_: Iterable[SessionRecord]) -> list[TrainingExample]:
    out = []
    for sess in log_:
        top = sess.displayed(1)
        out.append(TrainingExample(top.key, top.x, sess.clicks[0], 1))
    return out


def all_position_examples(log_: Iterable[SessionRecord]) -> list[TrainingExample]:
    out = []
    for sess in log_:
        for p in range(1, sess.s + 1):
            doc = sess.displayed(p)
            out.append(TrainingExample(doc.key, doc.x, sess.clicks[p - 1], p))
    return out


def train_model(recipe: str, hyper: HyperParams, exploration: Sequence[SessionRecord] = (),
                control: Sequence[SessionRecord] = ()) -> ModelState:
    """Fit the batch model named by ``recipe`` on the given training sessions."""
    if recipe not in RECIPES:
        raise ConfigurationError(f"unknown training source {recipe!r}; known: {', '.join(RECIPES)}")
    if recipe.startswith("exploration"):
        hyper = hyper.replace(fit_bias=not recipe.endswith(",nb"))
        examples = position1_examples(exploration)
    elif recipe == "control@1":
        examples = position1_examples(control)
    else:
        examples = all_position_examples(control)
    if not examples:
        log.warning("training extraction for %s is empty; returning the priors", recipe)
    if recipe.startswith("control@4"):
        return solve_with_positions(examples, hyper, fit_positions=recipe == "control@4")
    stats = SufficientStats(hyper)
    if examples:
        stats.add_batch([ex.key for ex in examples], np.stack([ex.x for ex in examples]),
                        np.array([ex.c for ex in examples]))
    return solve(stats)


def recipes_for(policies: Iterable[str]) -> list[str]:
    needed = {REQUIRED_MODEL[p] for p in policies if p in REQUIRED_MODEL}
    return [r for r in RECIPES if r in needed]


@dataclass
class ExperimentResult:
    world: World
    models: dict[str, ModelState]
    reports: dict[str, ReplayReport]
    test_log: list[SessionRecord] = field(repr=False)


def run_experiment(spec: WorldSpec, policies: Sequence[str] = POLICY_NAMES,
                   hyper: HyperParams | None = None, split_ts: int | None = None,
                   reveal_interval: float = 300, epsilon: float = 0.0, seed: int = 0,
                   mode: str = "rank_one", models: Mapping[str, ModelState] | None = None) -> ExperimentResult:
    """Simulate logs, train the needed batch models, and replay every policy on the test split."""
    for name in policies:
        if name not in POLICY_NAMES:
            raise ConfigurationError(f"unknown policy {name!r}")
    hyper = hyper or HyperParams(d=spec.d, s=spec.s)
    split_ts = spec.horizon // 2 if split_ts is None else split_ts
    world = generate_world(spec)
    exploration = generate_exploration_log(world)
    train, test = split_log(exploration, split_ts)
    models = dict(models or {})
    needed = [r for r in recipes_for(policies) if r not in models]
    control_train: list[SessionRecord] = []
    if any(r.startswith("control") for r in needed):
        control_train, _ = split_log(generate_control_log(world), split_ts)
    for recipe in needed:
        models[recipe] = train_model(recipe, hyper, train, control_train)
    reports = {}
    for name in policies:
        policy = make_policy(name, hyper, models, epsilon=epsilon, rng_seed=seed, mode=mode)
        reports[name] = replay(policy, test, reveal_interval=reveal_interval)
    return ExperimentResult(world, models, reports, test)
