"""Dropout MPC: ensemble neural model-predictive control with MC-dropout realizations."""

from .ensemble import EnsembleConfig, EnsembleDecision, dropout_mpc_step
from .net import ModelParams, NetworkModel, TrainConfig, load_params, save_params, train
from .plant import DataGenConfig, Dataset, DisturbanceModel, Plant, generate_dataset
from .runner import SCENARIOS, RunLog, Scenario, compare, format_table, metrics, run_closed_loop
from .trajopt import MpcConfig, OptimizedHorizon, build_problem, solve_dare, solve_mpc

__all__ = [
    "DataGenConfig", "Dataset", "DisturbanceModel", "EnsembleConfig", "EnsembleDecision", "ModelParams",
    "MpcConfig", "NetworkModel", "OptimizedHorizon", "Plant", "RunLog", "SCENARIOS", "Scenario",
    "TrainConfig", "build_problem", "compare", "dropout_mpc_step", "format_table", "generate_dataset", "load_params",
    "metrics", "run_closed_loop", "save_params", "solve_dare", "solve_mpc", "train",
]
__version__ = "0.1.0"
