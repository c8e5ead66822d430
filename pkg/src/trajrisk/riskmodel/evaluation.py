"""Cross-validated evaluation, per-cluster training and the metric set."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from ..cohort import PreparedCohort
from ..seeding import derive_seed
from .ebm import AdditiveRiskModel, ModelConfig, feature_importance, fit_additive_model
from .smote import smote_nc

logger = logging.getLogger(__name__)

METRICS = ("auroc", "accuracy", "f1", "precision", "sensitivity", "specificity", "brier")
CATEGORICAL = ("gender", "first_careunit", "last_careunit", "admission_type", "admission_location",
               "top_icd_class", "second_icd_class")


@dataclass(frozen=True)
class ModelFeatureSet:
    continuous: tuple[str, ...]
    categorical: tuple[str, ...]

    @property
    def columns(self) -> list[str]:
        return list(self.continuous) + list(self.categorical)


def feature_frame(cohort: PreparedCohort, patient_ids=None) -> tuple[pd.DataFrame, np.ndarray, ModelFeatureSet]:
    """Static feature rows, outcomes and the feature set for ``patient_ids``."""
    ids = list(cohort.patient_ids if patient_ids is None else patient_ids)
    frame = pd.DataFrame([cohort.static[pid].as_dict() for pid in ids])
    categorical = tuple(c for c in frame.columns if c in CATEGORICAL)
    continuous = tuple(c for c in frame.columns if c not in CATEGORICAL)
    fs = ModelFeatureSet(continuous, categorical)
    frame = frame[fs.columns]
    for c in continuous:
        frame[c] = frame[c].astype(np.float64)
    y = np.array([int(cohort.outcomes[pid]) for pid in ids], dtype=np.int64)
    return frame, y, fs


# ---------------------------------------------------------------------------
# folds and metrics


def stratified_kfold(y, k: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Test-index arrays for ``k`` stratified folds.

    Each class is shuffled and dealt round-robin; the dealing position
    carries over between classes so fold sizes stay within one of each other.
    """
    y = np.asarray(y)
    if k < 2:
        raise ValueError("k must be >= 2")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) == 0 or counts.min() < k:
        raise ValueError(f"every class needs at least k={k} members (counts {dict(zip(classes.tolist(), counts.tolist()))})")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    start = 0
    for c in classes:
        members = rng.permutation(np.flatnonzero(y == c))
        fold_of[members] = (start + np.arange(len(members))) % k
        start = (start + len(members)) % k
    return [np.flatnonzero(fold_of == f) for f in range(k)]


def auroc(y_true, scores) -> float:
    """Mann-Whitney U / (n_pos n_neg) with average ranks for ties."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def brier(y_true, prob) -> float:
    y = np.asarray(y_true, dtype=np.float64)
    return float(np.mean((np.asarray(prob, dtype=np.float64) - y) ** 2))


def _ratio(num, den) -> float:
    return float(num / den) if den else 0.0


def classification_metrics(y_true, prob, threshold: float = 0.5) -> dict[str, float]:
    y = np.asarray(y_true).astype(bool)
    pred = np.asarray(prob) >= threshold
    tp = int((pred & y).sum())
    tn = int((~pred & ~y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    return {
        "auroc": auroc(y, prob),
        "accuracy": _ratio(tp + tn, len(y)),
        "f1": _ratio(2 * precision * sensitivity, precision + sensitivity),
        "precision": precision,
        "sensitivity": sensitivity,
        "specificity": _ratio(tn, tn + fp),
        "brier": brier(y, prob),
    }


@dataclass
class MetricsReport:
    """Per-metric (mean, SD) over folds; SD uses ddof=1."""

    folds: list[dict[str, float]]
    n_patients: int = 0
    n_deaths: int = 0

    def mean(self, metric: str) -> float:
        return float(np.nanmean([f[metric] for f in self.folds]))

    def sd(self, metric: str) -> float:
        values = np.array([f[metric] for f in self.folds], dtype=float)
        values = values[~np.isnan(values)]
        return float(values.std(ddof=1)) if len(values) > 1 else 0.0

    def summary(self) -> dict[str, dict[str, float]]:
        return {m: {"mean": self.mean(m), "sd": self.sd(m)} for m in METRICS}

    def as_dict(self) -> dict:
        return {"n_patients": self.n_patients, "n_deaths": self.n_deaths,
                "n_folds": len(self.folds), "metrics": self.summary()}


def _fold_unit(X, y, train, test, categorical, config: ModelConfig, fold: int):
    fold_cfg = replace(config, seed=derive_seed(config.seed, "fold", fold))
    Xtr, ytr = smote_nc(X.iloc[train], y[train], categorical=categorical,
                        k_neighbors=config.smote_k, seed=derive_seed(config.seed, "smote", fold))
    model = fit_additive_model(Xtr, ytr, categorical=categorical, config=fold_cfg)
    prob = model.predict_proba(X.iloc[test])
    return classification_metrics(y[test], prob, config.threshold)


def evaluate_cv(X: pd.DataFrame, y, config: ModelConfig | None = None, categorical=()) -> MetricsReport:
    """Stratified k-fold CV with SMOTE-NC applied to training folds only."""
    config = config or ModelConfig()
    y = np.asarray(y, dtype=np.int64)
    folds = stratified_kfold(y, config.k_folds, derive_seed(config.seed, "folds"))
    idx = np.arange(len(y))
    results = []
    for f, test in enumerate(folds):
        train = np.setdiff1d(idx, test)
        results.append(_fold_unit(X, y, train, test, list(categorical), config, f))
    return MetricsReport(results, len(y), int(y.sum()))


# ---------------------------------------------------------------------------
# per-cluster training


@dataclass
class ClusterModels:
    reports: dict[str, MetricsReport]
    skipped: dict[str, str]
    importances: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    models: dict[str, AdditiveRiskModel] = field(default_factory=dict)

    def metrics_json(self) -> dict:
        return {
            "models": {name: rep.as_dict() for name, rep in self.reports.items()},
            "skipped": dict(self.skipped),
        }

    def importances_frame(self) -> pd.DataFrame:
        rows = [(name, term, value) for name, items in self.importances.items() for term, value in items]
        return pd.DataFrame(rows, columns=["model", "term", "importance"])


def _usable(y: np.ndarray, config: ModelConfig) -> str | None:
    deaths = int(y.sum())
    alive = len(y) - deaths
    if deaths == 0 or alive == 0:
        return f"single outcome class ({deaths} deaths, {alive} survivors)"
    if min(deaths, alive) < config.k_folds:
        return f"minority class has {min(deaths, alive)} members, fewer than k={config.k_folds}"
    if min(deaths, alive) - (min(deaths, alive) + config.k_folds - 1) // config.k_folds <= config.smote_k:
        return f"training folds would hold too few minority samples for SMOTE-NC (k={config.smote_k})"
    return None


def train_per_cluster(cohort: PreparedCohort, labels, config: ModelConfig | None = None,
                      patient_ids=None, fit_full: bool = True) -> ClusterModels:
    """CV-evaluate one model per cluster and one pooled over every patient.

    ``labels`` align with ``patient_ids`` (default: the cohort's order).
    Noise (-1) patients only enter the pooled model. Clusters whose outcome
    counts cannot support k-fold CV are skipped with a reason. With
    ``fit_full`` a final model per group is also trained on all its patients
    (for importances and the model bundle).
    """
    config = config or ModelConfig()
    ids = list(cohort.patient_ids if patient_ids is None else patient_ids)
    labels = np.asarray(labels)
    if len(labels) != len(ids):
        raise ValueError("labels and patient ids differ in length")
    X, y, fs = feature_frame(cohort, ids)
    groups = [("pooled", np.arange(len(ids)))]
    groups += [(f"cluster_{int(c)}", np.flatnonzero(labels == c)) for c in np.unique(labels[labels >= 0])]

    out = ClusterModels({}, {})
    for name, rows in groups:
        reason = _usable(y[rows], config)
        if reason:
            logger.info("skipping %s: %s", name, reason)
            out.skipped[name] = reason
            continue
        Xg = X.iloc[rows].reset_index(drop=True)
        # same seed for every group: a group holding everyone reproduces the pooled run
        out.reports[name] = evaluate_cv(Xg, y[rows], config, fs.categorical)
        if fit_full:
            Xb, yb = smote_nc(Xg, y[rows], categorical=fs.categorical, k_neighbors=config.smote_k,
                              seed=derive_seed(config.seed, "smote", "full"))
            model = fit_additive_model(Xb, yb, categorical=fs.categorical, config=config)
            out.models[name] = model
            out.importances[name] = feature_importance(model, Xg)
    return out
