"""Grounded video description with language-refined scene graphs."""

__version__ = "0.1.0"

from .dataset import Dataset, SynthConfig, Vocabulary, synthesize
from .model import DESK_DIMS, PAPER_DIMS, GroundedCaptioner, ModelDims
from .training import TrainConfig, run_training

__all__ = [
    "Dataset", "SynthConfig", "Vocabulary", "synthesize",
    "GroundedCaptioner", "ModelDims", "DESK_DIMS", "PAPER_DIMS",
    "TrainConfig", "run_training", "__version__",
]
