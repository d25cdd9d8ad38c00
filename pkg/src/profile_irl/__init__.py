"""Reward learning by matching optimality profiles with optimal transport."""

from .distributions import (
    AugmentedDataset,
    OptimalityProfile,
    augment,
    empirical_return_distribution,
    exact_return_distribution,
    returns,
)
from .mdp import (
    GridworldSpec,
    TabularMdp,
    TabularPolicy,
    Trajectory,
    build_gridworld,
    enumerate_trajectories,
    sample_trajectory,
    value_iteration,
)
from .ot import TransportPlan, exact_plan, ot_loss, sinkhorn_plan, wasserstein
from .reward import LossWeights, RewardModel, SupervisionSets, total_loss_and_grad
from .trainer import RunLog, TrainConfig, fit, resume

__version__ = "0.1.0"

__all__ = [
    "AugmentedDataset", "OptimalityProfile", "augment", "empirical_return_distribution",
    "exact_return_distribution", "returns", "GridworldSpec", "TabularMdp", "TabularPolicy",
    "Trajectory", "build_gridworld", "enumerate_trajectories", "sample_trajectory",
    "value_iteration", "TransportPlan", "exact_plan", "ot_loss", "sinkhorn_plan", "wasserstein",
    "LossWeights", "RewardModel", "SupervisionSets", "total_loss_and_grad", "RunLog",
    "TrainConfig", "fit", "resume",
]
