"""Multi-modal contrastive pretraining for SAR building segmentation.

A small reverse-mode autodiff engine on numpy drives per-modality conv
encoders trained with a full-graph multiview contrastive loss, then a SAR
segmentation model finetuned and scored on synthetic co-registered scenes.
"""

from .errors import CMCError, ConfigError, DataError, DivergenceError
from .tensor import Tensor
from .training import ExperimentConfig, desk_config

__version__ = "0.1.0"

__all__ = ["CMCError", "ConfigError", "DataError", "DivergenceError", "ExperimentConfig", "Tensor", "desk_config"]
