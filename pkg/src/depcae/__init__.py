"""Depth-weighted convolutional autoencoder for video anomaly detection.

The package covers the whole loop on synthetic footage: rendering a scene
with known depth, windowing it, training the autoencoder with a plain or a
depth-weighted reconstruction loss, picking an operating threshold from
proxy outliers, and reporting metrics.
"""
from depcae.detect import ScoredWindow, ThresholdReport, score_windows, select_threshold_max_f1
from depcae.experiment import ExperimentConfig, TrainConfig, ablation_run, train_model
from depcae.geometry import PinholeCamera, SceneObject, depth_invariant_score, render_scene
from depcae.loss import DepthWeights, depth_weighted_mse, mse_loss
from depcae.metrics import MetricsReport, auroc, confusion_metrics, evaluate
from depcae.model import DepCaeModel, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DepCaeModel", "DepthWeights", "ExperimentConfig", "MetricsReport", "PinholeCamera", "SceneObject",
    "ScoredWindow", "ThresholdReport", "TrainConfig", "ablation_run", "auroc", "build_model",
    "confusion_metrics", "depth_invariant_score", "depth_weighted_mse", "evaluate", "load_checkpoint",
    "mse_loss", "render_scene", "save_checkpoint", "score_windows", "select_threshold_max_f1", "train_model",
]
