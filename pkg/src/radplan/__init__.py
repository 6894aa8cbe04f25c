"""Retrieval-guided diffusion planning for offline RL."""

from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule, sample_plan
from .planner import Planner, PlannerConfig, ablation_variant, run_episode
from .retrieval import RetrievalQuery, StateDatabase, build_database, retrieve_target
from .steps import StepEstimator, estimate_steps
from .trajectory import OfflineDataset, Trajectory, load_dataset, save_dataset

__all__ = [
    "GuidanceConfig", "NoiseSchedule", "make_schedule", "sample_plan",
    "Planner", "PlannerConfig", "ablation_variant", "run_episode",
    "RetrievalQuery", "StateDatabase", "build_database", "retrieve_target",
    "StepEstimator", "estimate_steps",
    "OfflineDataset", "Trajectory", "load_dataset", "save_dataset",
]

__version__ = "0.1.0"
