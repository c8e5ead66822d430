"""Internal cluster validity, the min-samples sweep and label matching
across runs."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import hdbscan as hdb


def _prepare(points, labels):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ValueError("points and labels differ in length")
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ValueError("need at least 2 clusters")
    return x, labels, clusters


def silhouette_samples(points, labels) -> np.ndarray:
    """Per-point silhouette; points in singleton clusters score 0."""
    x, labels, clusters = _prepare(points, labels)
    d = cdist(x, x)
    n = len(x)
    # mean distance from every point to every cluster
    member = (labels[:, None] == clusters[None, :]).astype(float)
    counts = member.sum(axis=0)
    sums = d @ member
    own = np.searchsorted(clusters, labels)
    own_count = counts[own]
    a = np.where(own_count > 1, sums[np.arange(n), own] / np.maximum(own_count - 1, 1), 0.0)
    other = sums / counts
    other[np.arange(n), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    return np.where((own_count > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)


def silhouette(points, labels) -> float:
    """Mean silhouette over all points."""
    return float(silhouette_samples(points, labels).mean())


def _centroids(x, labels, clusters):
    return np.array([x[labels == c].mean(axis=0) for c in clusters])


def calinski_harabasz(points, labels) -> float:
    """Between/within dispersion ratio; +inf when all clusters are points."""
    x, labels, clusters = _prepare(points, labels)
    n, k = len(x), len(clusters)
    if n == k:
        raise ValueError("calinski_harabasz needs more points than clusters")
    centroids = _centroids(x, labels, clusters)
    grand = x.mean(axis=0)
    between = sum(
        (labels == c).sum() * float(((centroid - grand) ** 2).sum())
        for c, centroid in zip(clusters, centroids)
    )
    within = sum(
        float(((x[labels == c] - centroid) ** 2).sum()) for c, centroid in zip(clusters, centroids)
    )
    if within == 0:
        return math.inf
    return float((between / (k - 1)) / (within / (n - k)))


def davies_bouldin(points, labels) -> float:
    """Mean worst-case scatter/separation ratio; +inf for coincident centroids."""
    x, labels, clusters = _prepare(points, labels)
    centroids = _centroids(x, labels, clusters)
    scatter = np.array([
        np.sqrt(((x[labels == c] - centroid) ** 2).sum(axis=1)).mean()
        for c, centroid in zip(clusters, centroids)
    ])
    sep = cdist(centroids, centroids)
    k = len(clusters)
    worst = np.empty(k)
    for i in range(k):
        ratios = []
        for j in range(k):
            if j == i:
                continue
            ratios.append(math.inf if sep[i, j] == 0 else (scatter[i] + scatter[j]) / sep[i, j])
        worst[i] = max(ratios)
    return float(worst.mean())


@dataclass(frozen=True)
class ValiditySweepRow:
    min_samples_value: int
    n_clusters: int
    silhouette: float
    calinski_harabasz: float
    davies_bouldin: float
    n_noise: int


@dataclass
class SweepResult:
    rows: list[ValiditySweepRow]
    selected: int | None
    error: str | None = None
    labelings: dict | None = None

    def to_csv(self, path) -> None:
        fields = list(ValiditySweepRow.__dataclass_fields__)
        lines = [",".join(fields + ["selected"])]
        for row in self.rows:
            values = asdict(row)
            lines.append(",".join([repr(values[f]) if isinstance(values[f], float) else str(values[f])
                                   for f in fields] + [str(int(row.min_samples_value == self.selected))]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def score_labeling(points, labels) -> tuple[float, float, float]:
    """All three indices on non-noise points, or NaN when fewer than 2 clusters."""
    labels = np.asarray(labels)
    keep = labels >= 0
    x = np.asarray(points)[keep]
    lab = labels[keep]
    if len(np.unique(lab)) < 2 or len(lab) == len(np.unique(lab)):
        return math.nan, math.nan, math.nan
    return silhouette(x, lab), calinski_harabasz(x, lab), davies_bouldin(x, lab)


def sweep_parameter(embedding, values, min_cluster_size: int | None = None) -> SweepResult:
    """Run HDBSCAN* per grid value and pick the best by silhouette.

    Each value sets min_samples and, unless ``min_cluster_size`` is fixed,
    min_cluster_size too. Ties on silhouette go to the lower Davies-Bouldin.
    """
    values = list(values)
    if not values:
        raise ValueError("empty parameter grid")
    coords = np.asarray(getattr(embedding, "coordinates", embedding), dtype=np.float64)
    dist = hdb.euclidean_distances(coords)
    rows, labelings = [], {}
    for v in values:
        result = hdb.hdbscan(dist, min_samples=int(v),
                             min_cluster_size=int(min_cluster_size or v), metric="precomputed")
        lab = result.labeling
        labelings[int(v)] = lab
        sil, ch, db = score_labeling(coords, lab.labels)
        rows.append(ValiditySweepRow(int(v), lab.n_clusters, sil, ch, db, lab.n_noise))
    valid = [r for r in rows if not math.isnan(r.silhouette)]
    if not valid:
        return SweepResult(rows, None, "no grid value produced 2 or more clusters", labelings)
    best = min(valid, key=lambda r: (-r.silhouette, r.davies_bouldin, r.min_samples_value))
    return SweepResult(rows, best.min_samples_value, None, labelings)


def adjusted_rand_index(labels_a, labels_b) -> float:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("labelings differ in length")
    n = len(a)
    if n < 2:
        return 1.0
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return float((x * (x - 1) / 2).sum())

    index = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    expected = sum_a * sum_b / (n * (n - 1) / 2)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def match_labels(reference_labels, other_labels) -> tuple[dict[int, int], float]:
    """One-to-one map from ``other`` clusters to ``reference`` clusters that
    maximises overlap; noise is never mapped.

    The fraction is over patients with a non-noise reference label.
    """
    ref = np.asarray(reference_labels)
    oth = np.asarray(other_labels)
    if ref.shape != oth.shape:
        raise ValueError("labelings differ in length")
    ref_ids = np.unique(ref[ref >= 0])
    oth_ids = np.unique(oth[oth >= 0])
    mapping: dict[int, int] = {}
    if len(ref_ids) and len(oth_ids):
        table = np.zeros((len(oth_ids), len(ref_ids)), dtype=np.int64)
        both = (ref >= 0) & (oth >= 0)
        np.add.at(table, (np.searchsorted(oth_ids, oth[both]), np.searchsorted(ref_ids, ref[both])), 1)
        rows, cols = linear_sum_assignment(-table)
        mapping = {int(oth_ids[r]): int(ref_ids[c]) for r, c in zip(rows, cols)}
    scored = ref >= 0
    if not scored.any():
        return mapping, 1.0
    mapped = np.array([mapping.get(int(o), -1) if o >= 0 else -1 for o in oth])
    return mapping, float((mapped[scored] == ref[scored]).mean())


def per_cluster_consistency(reference_labels, other_labels, mapping: dict[int, int]) -> dict[int, float]:
    ref = np.asarray(reference_labels)
    mapped = np.array([mapping.get(int(o), -1) if o >= 0 else -1 for o in np.asarray(other_labels)])
    return {int(c): float((mapped[ref == c] == c).mean()) for c in np.unique(ref[ref >= 0])}
