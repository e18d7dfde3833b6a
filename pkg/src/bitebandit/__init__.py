"""Contextual bandits for choosing robotic bite acquisition strategies."""

from .bandit_core import (
    ActionDistribution,
    Context,
    EpsilonGreedy,
    Greedy,
    HyperParams,
    LinUCB,
    PolicyState,
    epsilon_greedy_distribution,
    greedy_action,
    init_policy,
    learn,
    linucb_scores,
    linucb_select,
    predict_losses,
    sample_action,
)
from .environment import (
    ReplayEnvironment,
    Schedule,
    SyntheticEnvironment,
    herding_estimate,
    impute_dr_losses,
    run_protocol,
)
from .metrics import cumulative_regret, convergence_point, fit_full_feedback
from .data_io import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
