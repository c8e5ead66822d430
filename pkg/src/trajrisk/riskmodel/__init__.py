from .ebm import AdditiveRiskModel, ModelConfig, feature_importance, fit_additive_model, predict_proba
from .evaluation import (
    MetricsReport,
    ModelFeatureSet,
    auroc,
    brier,
    classification_metrics,
    evaluate_cv,
    feature_frame,
    stratified_kfold,
    train_per_cluster,
)
from .smote import smote_nc

__all__ = [
    "AdditiveRiskModel", "ModelConfig", "MetricsReport", "ModelFeatureSet", "auroc", "brier",
    "classification_metrics", "evaluate_cv", "feature_frame", "feature_importance",
    "fit_additive_model", "predict_proba", "smote_nc", "stratified_kfold", "train_per_cluster",
]
