"""Anchored truncated diffusion over action chunks with per-anchor scoring,
test-time residual correction, and a deterministic planar benchmark."""

from .errors import AnchorDiffError
from .policy import AnchoredPolicy, GenerationResult, L1Policy, PolicyConfig
from .residual import ResidualConfig, ResidualCorrector, apply_residual
from .schedule import DiffusionSchedule, TruncatedRange, build_schedule, truncated_range
from .simenv import DisturbanceConfig, PlanarEnv
from .vocabulary import AnchorVocabulary, NormStats

__all__ = [
    "AnchorDiffError", "AnchoredPolicy", "GenerationResult", "L1Policy",
    "PolicyConfig", "ResidualConfig", "ResidualCorrector", "apply_residual",
    "DiffusionSchedule", "TruncatedRange", "build_schedule", "truncated_range",
    "DisturbanceConfig", "PlanarEnv", "AnchorVocabulary", "NormStats",
]

__version__ = "0.1.0"
