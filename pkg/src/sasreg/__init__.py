"""Scene-appearance separation registration for bidirectionally scanned images."""

from .config import TrainConfig
from .data import (AugmentConfig, DatasetSplit, Frame, FrameSource, augment,
                   deinterleave, interleave, load_dataset, split_dataset)
from .losses import (LossBreakdown, LossWeights, align_loss, cycle_loss,
                     differentiable_ssim, ncc, scene_loss, total_loss)
from .metrics import MetricsReport, evaluate_dataset, interframe_ncc, psnr, vci
from .model import (ModelConfig, SceneAppearanceModel, instance_norm,
                    load_checkpoint, save_checkpoint)
from .sim import (AcquisitionParams, DatasetRecipe, PhantomScene, SimGroundTruth,
                  analytic_reregister, generate_phantom, render, simulate_pair)
from .synth import synthesize_dataset, synthesize_frames
from .train import benchmark_inference, run_ablation_suite, train

__version__ = "0.1.0"

__all__ = [
    "AcquisitionParams", "AugmentConfig", "DatasetRecipe", "DatasetSplit",
    "Frame", "FrameSource", "LossBreakdown", "LossWeights", "MetricsReport",
    "ModelConfig", "PhantomScene", "SceneAppearanceModel", "SimGroundTruth",
    "TrainConfig", "align_loss", "analytic_reregister", "augment",
    "benchmark_inference", "cycle_loss", "deinterleave", "differentiable_ssim",
    "evaluate_dataset", "generate_phantom", "instance_norm", "interframe_ncc",
    "interleave", "load_checkpoint", "load_dataset", "ncc", "psnr", "render",
    "run_ablation_suite", "save_checkpoint", "scene_loss", "simulate_pair",
    "split_dataset", "synthesize_dataset", "synthesize_frames", "total_loss",
    "train", "vci",
]
