"""Invertible underwater image enhancement with heuristic physical priors,
frequency-aware couplings and semantic collaborative learning."""

from .config import RunConfig
from .flow import FlowConfig, HeuristicFlow, PriorPair
from .losses import LossWeights, PerceptualExtractor
from .prior import PhysicalParams, PriorEncoder
from .scl import HIN, SCLState, collaborative_train

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "FlowConfig",
    "HeuristicFlow",
    "PriorPair",
    "LossWeights",
    "PerceptualExtractor",
    "PhysicalParams",
    "PriorEncoder",
    "HIN",
    "SCLState",
    "collaborative_train",
    "__version__",
]
