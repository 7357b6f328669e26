"""Unsupervised hierarchical image-quality triage.

Outstanding images train a conditional coupling-flow density over a feature
pyramid. The image score separates outstanding from non-outstanding images;
the multi-scale likelihood grids of the rest are reduced and split into
gradable and ungradable by 2-way clustering.
"""

from .dataset_io import GrayImage, Manifest, QualityGrade, SynthCorpusSpec
from .errors import (ConfigError, ContractError, FormatError, NumericError,
                     UnoqaError)
from .pipeline import PipelineConfig

__all__ = [
    "ConfigError", "ContractError", "FormatError", "GrayImage", "Manifest",
    "NumericError", "PipelineConfig", "QualityGrade", "SynthCorpusSpec", "UnoqaError",
]
__version__ = "0.1.0"
