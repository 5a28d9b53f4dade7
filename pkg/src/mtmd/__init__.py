"""Multi-task multi-domain two-tower lightweight ranker."""
from .config import CONSTRAINED_DIMS, DataConfig, ModelConfig, TrainConfig
from .errors import ConfigurationError, DataError, FormatError, MtmdError, RoutingError
from .schema import ALL_DOMAINS, AdProduct, DomainKey, Surface, TaskId, make_default_schema
from .towers import MtmdModel, predict_probs, rank_top_k

__all__ = [
    "ALL_DOMAINS",
    "AdProduct",
    "CONSTRAINED_DIMS",
    "ConfigurationError",
    "DataConfig",
    "DataError",
    "DomainKey",
    "FormatError",
    "ModelConfig",
    "MtmdError",
    "MtmdModel",
    "RoutingError",
    "Surface",
    "TaskId",
    "TrainConfig",
    "make_default_schema",
    "predict_probs",
    "rank_top_k",
]
