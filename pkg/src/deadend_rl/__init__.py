"""Safe reinforcement learning with a pretrained recovery shield.

A recovery policy and an optimal safety critic are trained offline; online,
a frozen behavior-correction shield replaces every task action whose
predicted cost crosses the safety threshold.  Exact tabular oracles verify
the dead-end theory on desk-scale environments.
"""

from .core import (CriticDivergenceError, EpisodeOverError, SmdpSpec, StateLabel,
                   Transition, TransitionBatch, cost_indicator, is_action_admissible)
from .envs import CarBrakeEnv, GridHazardEnv, PointMomentumEnv, make_chain, tabularize
from .oracle import (ExactValues, TabularSMDP, certify_theorem2, compute_assumption_horizon,
                     enumerate_dead_ends, policy_cost_evaluation, value_iteration_optimal)
from .pretrain import (OfflineDataset, RecoveryPolicy, SafetyCritic, collect_offline,
                       expectile_loss, filter_pre_violation, pretrain, rrl_baseline_pretrain)
from .online import (OracleShield, SacLearner, Shield, TabularQLearner, behavior_correct,
                     train_online)
from .metrics import MetricsReport, evaluate
from .config import ExperimentConfig, load_config
from .runner import ablation_grid, plug_and_play_eval, run_experiment

__version__ = "0.1.0"
