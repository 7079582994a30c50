"""Image manipulation detection with a promptable segmenter driven by
cross-view noise prompts.

The public surface is re-exported here; see the submodules for details.
"""

from .config import TrainConfig, load_config, parse_config
from .errors import (CheckpointError, CheckpointMismatch, ConfigError, CorruptFile, DataError,
                     IMDPError, VersionMismatch)
from .metrics import MetricsReport, build_report, composite_f1, image_metrics, pixel_f1
from .model import IMDPrompter
from .pipeline import (Predictor, evaluate, infer, load_checkpoint, robustness_sweep, save_checkpoint,
                       train)
from .types import BoxPrompt, ImageSample, LossBreakdown, ViewId

__version__ = "0.1.0"

__all__ = [
    "BoxPrompt", "CheckpointError", "CheckpointMismatch", "ConfigError", "CorruptFile", "DataError",
    "IMDPError", "IMDPrompter", "ImageSample", "LossBreakdown", "MetricsReport", "Predictor",
    "TrainConfig", "VersionMismatch", "ViewId", "build_report", "composite_f1", "evaluate",
    "image_metrics", "infer", "load_checkpoint", "load_config", "parse_config", "pixel_f1",
    "robustness_sweep", "save_checkpoint", "train",
]
