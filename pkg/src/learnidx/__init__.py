"""Two-stage learned range index with workload-aware training and a model cache."""

from .core_index import SortedDataset, StagedIndex, lookup, lookup_many, train_staged
from .models import DEFAULT_ARCHS, LIN, ModelArch, TrainConfig

__all__ = [
    "DEFAULT_ARCHS",
    "LIN",
    "ModelArch",
    "SortedDataset",
    "StagedIndex",
    "TrainConfig",
    "lookup",
    "lookup_many",
    "train_staged",
]
