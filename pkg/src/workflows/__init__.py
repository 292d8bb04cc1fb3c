"""Training stages and the end-to-end experiment."""

from .experiment import PipelineConfig, load_pipeline_config, run_ablation, run_experiment
from .trainer import TrainConfig, dual_teacher_step, train_dual_teacher

__all__ = [
    "PipelineConfig",
    "TrainConfig",
    "dual_teacher_step",
    "load_pipeline_config",
    "run_ablation",
    "run_experiment",
    "train_dual_teacher",
]
