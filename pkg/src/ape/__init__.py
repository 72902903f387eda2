"""Alignment heads over frozen unimodal embeddings.

Trains small text-side heads (weight-tied MLP or token-lookup table, plus a
learnable temperature) against fixed image embeddings with a symmetric batch
contrastive loss, and evaluates the alignment with template-based zero-shot
classification and retrieval recall.
"""

from .errors import ApeError, ConfigError, DataError, DimensionError, NumericError
from .heads import AlignmentHead, HeadConfig, LookupHead, MlpHead, count_params
from .loss import contrastive_loss, loss_and_grads
from .optim import AdamW, Schedule
from .tensor import Tape, Tensor, finite_difference_check, precision
from .trainer import TrainConfig, accumulate_gradients, resume, train

__version__ = "0.1.0"

__all__ = [
    "ApeError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "NumericError",
    "AlignmentHead",
    "HeadConfig",
    "LookupHead",
    "MlpHead",
    "count_params",
    "contrastive_loss",
    "loss_and_grads",
    "AdamW",
    "Schedule",
    "Tape",
    "Tensor",
    "finite_difference_check",
    "precision",
    "TrainConfig",
    "accumulate_gradients",
    "resume",
    "train",
    "__version__",
]
