"""Click-feedback re-ranking with a hybrid ridge CTR@1 model.

Batch and exact online learners, epsilon-greedy re-ranking policies, replay
evaluation on shuffled exploration logs, and a synthetic log generator.
"""
from .batch import HybridRidgeCTR, SufficientStats, TrainingExample, accumulate, solve, solve_with_positions
from .exceptions import ConfigurationError, ContractViolation
from .model import HyperParams, ModelState, PairKey, predict_ctr1, predict_ctr_at_p
from .online import OnlineHybridRidgeCTR, OnlineLearner, init_learner
from .policy import (POLICY_NAMES, BaselinePolicy, BatchPolicy, Candidate, CountingPolicy, CountingState,
                     OnlinePolicy, RerankPolicy, counting_score, make_policy)
from .replay import (ReplayReport, SessionRecord, compute_click_metrics, positional_ctr_analysis, replay,
                     segment_report)
from .simlog import (World, WorldSpec, drift_world_spec, generate_control_log, generate_exploration_log,
                     generate_world, news_burst_spec, read_log, write_log)

__version__ = "0.1.0"

__all__ = [
    "HybridRidgeCTR", "SufficientStats", "TrainingExample", "accumulate", "solve", "solve_with_positions",
    "ConfigurationError", "ContractViolation",
    "HyperParams", "ModelState", "PairKey", "predict_ctr1", "predict_ctr_at_p",
    "OnlineHybridRidgeCTR", "OnlineLearner", "init_learner",
    "POLICY_NAMES", "BaselinePolicy", "BatchPolicy", "Candidate", "CountingPolicy", "CountingState",
    "OnlinePolicy", "RerankPolicy", "counting_score", "make_policy",
    "ReplayReport", "SessionRecord", "compute_click_metrics", "positional_ctr_analysis", "replay",
    "segment_report",
    "World", "WorldSpec", "drift_world_spec", "generate_control_log", "generate_exploration_log",
    "generate_world", "news_burst_spec", "read_log", "write_log",
]
