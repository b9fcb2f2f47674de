"""Fairness-aware hand-load estimation from wearable gait signals."""

from .errors import (ContractError, DataError, FairloadError, LengthError, NumericError,
                     ParameterError, ShapeError)
from .pipeline import Dataset, PipelineParams, RawTrial, build_dataset, normalize
from .synthgait import GeneratorConfig, generate_balanced_splits, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DataError", "FairloadError", "LengthError", "NumericError",
    "ParameterError", "ShapeError", "Dataset", "PipelineParams", "RawTrial",
    "build_dataset", "normalize", "GeneratorConfig", "generate_balanced_splits",
    "generate_dataset", "__version__",
]
