"""Paintable adversarial camouflage: pattern optimization and evaluation."""

from .face import BlendConfig, FaceSample, blend, preprocess
from .models import (
    ModelHandle,
    VerificationPair,
    calibrate_threshold,
    cosine_similarity,
    embed,
    recognition_rate,
    train_toy_model,
)
from .optimizer import OptimizationConfig, OptimizationTrace, lr_schedule, optimize_pattern
from .pattern import (
    Palette,
    PatternImage,
    PatternParams,
    clip_params,
    perturb_params,
    project_to_palette,
    rasterize,
    sample_random_params,
)

__version__ = "0.1.0"
