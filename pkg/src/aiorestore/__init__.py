"""Guided all-in-one image restoration at desk scale."""

from .backbone import RestorationModel, build_model, forward, set_perception_order
from .config import ModelConfig, OptimizerConfig, desk_scale_preset, load_config, full_preset
from .degrade import CompositeSpec, DegradationSpec, compose, generate_dataset
from .estimator import DegradationTransformer, GuidedRestorer
from .evaluation import MetricReport, evaluate, run_component_ablation, run_order_ablation
from .exceptions import RestoreError
from .icrm import AugmentationPolicy, internal_loss, total_loss
from .metrics import psnr, ssim
from .training import TrainState, load_checkpoint, save_checkpoint, train_loop, train_step

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "CompositeSpec", "DegradationSpec", "DegradationTransformer", "GuidedRestorer",
    "MetricReport", "ModelConfig", "OptimizerConfig", "RestorationModel", "RestoreError", "TrainState",
    "build_model", "compose", "desk_scale_preset", "evaluate", "forward", "generate_dataset", "internal_loss",
    "load_checkpoint", "load_config", "full_preset", "psnr", "run_component_ablation", "run_order_ablation",
    "save_checkpoint", "set_perception_order", "ssim", "total_loss", "train_loop", "train_step",
]
