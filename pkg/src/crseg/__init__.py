"""Semi-supervised 3D+time segmentation with spatial and temporal consistency regularization."""

from .config import ExperimentConfig, desk_profile
from .volume import DatasetSplit, LabelMap, LogitMap, TimeSeries, Volume3D

__version__ = "0.1.0"

__all__ = ["DatasetSplit", "ExperimentConfig", "LabelMap", "LogitMap", "TimeSeries", "Volume3D",
           "desk_profile"]
