"""Cross-user KV sharing for long-sequence CTR models.

Each history item's key and value are split into a small user-specific part,
computed per user and cached, and a wide collective part gathered from a
learnable global pool shared by all users. Only the user-specific part and
the pool indices need to be stored per user.
"""

from .attention import AttentionConfig, ModelConfig, SequenceBatch, PredictionBatch, auc, gauc, bce_loss
from .cachesim import CacheEntry, CacheStore, TierModel, compression_rate_for, decode, prefill
from .collective import CollectiveConfig, collective_backward, collective_forward, init_collective_params
from .errors import (CacheMissError, CollectiveKVError, NumericError, ShapeError, StorageError,
                     UndefinedMetricError, UsageError)
from .synthdata import SynthConfig, generate, split
from .train import TrainConfig, Trainer, evaluate, train

__all__ = [
    "AttentionConfig", "ModelConfig", "SequenceBatch", "PredictionBatch", "auc", "gauc", "bce_loss",
    "CacheEntry", "CacheStore", "TierModel", "compression_rate_for", "decode", "prefill",
    "CollectiveConfig", "collective_backward", "collective_forward", "init_collective_params",
    "CacheMissError", "CollectiveKVError", "NumericError", "ShapeError", "StorageError",
    "UndefinedMetricError", "UsageError",
    "SynthConfig", "generate", "split",
    "TrainConfig", "Trainer", "evaluate", "train",
]

__version__ = "0.1.0"
