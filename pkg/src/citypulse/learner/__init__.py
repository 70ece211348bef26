"""Congestion labeling (KMeans) and classification (random forest), written from scratch."""
from .forest import (
    DecisionTree, RandomForestModel, bootstrap_indices, feature_importances, rf_fit, rf_predict,
)
from .kmeans import (
    DEFAULT_CLUSTER_FEATURES, CongestionLabeler, KMeansModel, kmeans_fit, map_clusters_to_labels,
)
from .labels import LABELS, CongestionLabel
from .metrics import BatchSeries, EvalReport, evaluate, report_from_confusion, sequential_batch_eval
from .model import (
    CongestionModel, TrainConfig, TrainingResult, load_model, save_model, stratified_split,
    train_congestion_model,
)
from .scaling import Standardizer, standardize_fit

__all__ = [
    "BatchSeries", "CongestionLabel", "CongestionLabeler", "CongestionModel", "DEFAULT_CLUSTER_FEATURES",
    "DecisionTree", "EvalReport", "KMeansModel", "LABELS", "RandomForestModel", "Standardizer",
    "TrainConfig", "TrainingResult", "bootstrap_indices", "evaluate", "feature_importances",
    "kmeans_fit", "load_model", "map_clusters_to_labels", "report_from_confusion", "rf_fit",
    "rf_predict", "save_model", "sequential_batch_eval", "standardize_fit", "stratified_split",
    "train_congestion_model",
]
