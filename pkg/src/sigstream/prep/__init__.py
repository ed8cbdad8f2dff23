from .data import (
    FeatureInfo,
    StreamDataset,
    StreamRecord,
    dataset_from_arrays,
    load_dataset,
    read_matrix,
    write_matrix,
)
from .features import derive_time_features, reduce_dims
from .history import HistoryBatch, ResourceError, build_unit_input, build_window_input, distinct_points
from .splits import Fold, SplitPlan, make_splits
from .stats import StatsReport, dataset_stats

__all__ = [
    "FeatureInfo",
    "Fold",
    "HistoryBatch",
    "ResourceError",
    "SplitPlan",
    "StatsReport",
    "StreamDataset",
    "StreamRecord",
    "build_unit_input",
    "build_window_input",
    "dataset_from_arrays",
    "dataset_stats",
    "derive_time_features",
    "distinct_points",
    "load_dataset",
    "make_splits",
    "read_matrix",
    "reduce_dims",
    "write_matrix",
]
