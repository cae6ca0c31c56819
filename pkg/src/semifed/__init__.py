"""Desk-scale simulator for labels-at-server semi-supervised federated learning
with personalised pruned client models and teacher-guided server distillation."""

from .errors import (ConfigError, DegenerateBatchError, DescriptorError, DimensionError,
                     InvariantError, ModeViolationError, NumericError, ParameterError,
                     PartitionInfeasibleError, ProtocolError, PruningFloorError, SemiFedError,
                     UndefinedRatioError)
from .protocol import ExperimentConfig, build_data, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateBatchError", "DescriptorError", "DimensionError", "InvariantError",
    "ModeViolationError", "NumericError", "ParameterError", "PartitionInfeasibleError",
    "ProtocolError", "PruningFloorError", "SemiFedError", "UndefinedRatioError",
    "ExperimentConfig", "build_data", "run_experiment",
]
