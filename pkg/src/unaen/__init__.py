"""Unsupervised motion-artifact reduction for MR images.

Submodules: ``autodiff`` (tensors and reverse-mode gradients), ``nn``,
``models``, ``losses``, ``metrics``, ``kspace`` (motion simulation and
phantoms), ``data`` (MARF rasters and dataset trees), ``training``,
``checkpoint`` and ``cli``.
"""

from .kspace import MotionSpec, PhantomSpec, render_phantom, simulate_motion
from .metrics import MetricReport, evaluate_set, mse, psnr, ssim
from .models import (
    ABLATIONS,
    DiscriminatorConfig,
    GeneratorConfig,
    ModelConfig,
    UnaenModel,
    extract_artifact,
    reduce_artifacts,
    restore,
)
from .training import TrainConfig, Trainer, infer, train

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "MetricReport",
    "ModelConfig",
    "MotionSpec",
    "PhantomSpec",
    "TrainConfig",
    "Trainer",
    "UnaenModel",
    "evaluate_set",
    "extract_artifact",
    "infer",
    "mse",
    "psnr",
    "reduce_artifacts",
    "render_phantom",
    "restore",
    "simulate_motion",
    "ssim",
    "train",
]
