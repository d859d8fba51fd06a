"""Out-of-distribution detection by multi-level diffusion reconstruction."""

from .diffusion import NoiseSchedule, ReconstructionPlan, count_evaluations, linear_schedule
from .errors import OodkitError
from .nn import DenoiserNet
from .ood import ScoreMatrix, ValidationStats, score_dataset
from .rng import RngHandle

__version__ = "0.1.0"

__all__ = [
    "DenoiserNet",
    "NoiseSchedule",
    "OodkitError",
    "ReconstructionPlan",
    "RngHandle",
    "ScoreMatrix",
    "ValidationStats",
    "count_evaluations",
    "linear_schedule",
    "score_dataset",
]
