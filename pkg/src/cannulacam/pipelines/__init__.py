from .experiments import (
    PAPER_REFERENCE,
    SplitGuardError,
    dof_sweep,
    eval_recon,
    fov_experiment,
    reconstruct,
    resolution_experiment,
    train_eval_classify,
    train_eval_depth,
    train_recon,
)
from .nets import build_classifier_net, build_depth_net, build_recon_net
from .report import ExperimentReport
from .training import TrainConfig, TrainResult, train_network

__all__ = [
    "PAPER_REFERENCE", "SplitGuardError", "dof_sweep", "eval_recon", "fov_experiment", "reconstruct",
    "resolution_experiment", "train_eval_classify", "train_eval_depth", "train_recon",
    "build_classifier_net", "build_depth_net", "build_recon_net", "ExperimentReport",
    "TrainConfig", "TrainResult", "train_network",
]
