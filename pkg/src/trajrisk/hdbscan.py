"""HDBSCAN* on dense distances: mutual reachability, Prim's MST, condensed
tree and excess-of-mass cluster selection.

Ties are broken by lower index throughout, so identical inputs give
identical labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist


def euclidean_distances(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return cdist(x, x)


def _as_distances(data, metric: str) -> np.ndarray:
    if metric == "precomputed":
        d = np.asarray(getattr(data, "values", data), dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("precomputed distances must be a square matrix")
        return d
    if metric == "euclidean":
        return euclidean_distances(data)
    raise ValueError(f"unknown metric {metric!r}")


def core_distances(data, min_samples: int, metric: str = "euclidean") -> np.ndarray:
    """Distance from each point to its ``min_samples``-th nearest other point."""
    d = _as_distances(data, metric)
    n = d.shape[0]
    if not 1 <= min_samples < n:
        raise ValueError(f"min_samples must be in [1, n) (got {min_samples}, n={n})")
    others = d.copy()
    np.fill_diagonal(others, np.inf)
    return np.partition(others, min_samples - 1, axis=1)[:, min_samples - 1]


def mutual_reachability(distances, core: np.ndarray) -> np.ndarray:
    d = np.asarray(getattr(distances, "values", distances), dtype=np.float64)
    core = np.asarray(core, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] != core.shape[0]:
        raise ValueError("distance matrix and core distances disagree in shape")
    out = np.maximum(np.maximum(d, core[:, None]), core[None, :])
    np.fill_diagonal(out, 0.0)
    return out


def build_mst(mreach: np.ndarray) -> np.ndarray:
    """Prim's algorithm on a dense matrix.

    Returns an ``(n - 1, 3)`` array of ``(u, v, weight)`` rows in the order
    vertices join the tree; ties go to the lower vertex index.
    """
    m = np.asarray(mreach, dtype=np.float64)
    n = m.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    edges = np.empty((n - 1, 3))
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.zeros(n, dtype=np.int64)
    current = 0
    in_tree[0] = True
    for e in range(n - 1):
        row = m[current]
        better = (row < best) & ~in_tree
        best[better] = row[better]
        parent[better] = current
        candidates = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(candidates))
        edges[e] = (parent[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        current = nxt
    return edges


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Dendrogram rows ``(left, right, distance, size)`` from MST edges.

    Edges merge in ascending weight, ties by lower endpoint indices.
    """
    mst = np.asarray(mst, dtype=np.float64).reshape(-1, 3)
    lo = np.minimum(mst[:, 0], mst[:, 1])
    hi = np.maximum(mst[:, 0], mst[:, 1])
    order = np.lexsort((hi, lo, mst[:, 2]))
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    tree = np.empty((n - 1, 4))
    for k, e in enumerate(order):
        a, b = find(int(mst[e, 0])), find(int(mst[e, 1]))
        node = n + k
        tree[k] = (a, b, mst[e, 2], size[a] + size[b])
        parent[a] = parent[b] = node
        size[node] = size[a] + size[b]
    return tree


@dataclass
class CondensedTree:
    parent: np.ndarray
    child: np.ndarray
    lambda_val: np.ndarray
    child_size: np.ndarray
    n_points: int
    stability: dict = field(default_factory=dict)

    @property
    def root(self) -> int:
        return self.n_points

    def cluster_ids(self) -> list[int]:
        ids = {self.root}
        ids.update(int(c) for c in self.child if c >= self.n_points)
        return sorted(ids)

    def to_csv(self, path) -> None:
        lines = ["parent,child,lambda,child_size"]
        for p, c, lam, s in zip(self.parent, self.child, self.lambda_val, self.child_size):
            lines.append(f"{int(p)},{int(c)},{float(lam)!r},{int(s)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def condense_tree(mst: np.ndarray, min_cluster_size: int, n: int | None = None) -> CondensedTree:
    """Condense the single-linkage hierarchy of ``mst``.

    A split where both sides have at least ``min_cluster_size`` points starts
    two child clusters; otherwise the smaller side's points fall out of the
    parent at that split's lambda (1 / distance).
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    mst = np.asarray(mst, dtype=np.float64).reshape(-1, 3)
    if n is None:
        n = len(mst) + 1
    if n == 1:
        tree = CondensedTree(np.array([1], dtype=np.int64), np.array([0], dtype=np.int64),
                             np.array([0.0]), np.array([1], dtype=np.int64), 1)
        tree.stability = {1: 0.0}
        return tree
    hierarchy = single_linkage(mst, n)
    positive = hierarchy[:, 2][hierarchy[:, 2] > 0]
    # zero-distance merges are treated as the tightest observed distance
    floor = positive.min() if len(positive) else 1.0

    def lam(dist):
        return 1.0 / max(dist, floor)

    root = 2 * n - 2

    def left_right(node):
        row = hierarchy[node - n]
        return int(row[0]), int(row[1]), row[2]

    def size_of(node):
        return 1 if node < n else int(hierarchy[node - n, 3])

    def leaves(node):
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                a, b, _ = left_right(x)
                stack.extend((b, a))
        return out

    parents, children, lambdas, sizes = [], [], [], []
    label = {root: n}
    next_label = n + 1
    stack = [root]
    while stack:
        node = stack.pop()
        if node < n:
            continue
        a, b, dist = left_right(node)
        here = label[node]
        lv = lam(dist)
        sa, sb = size_of(a), size_of(b)
        if sa >= min_cluster_size and sb >= min_cluster_size:
            for side, s in ((a, sa), (b, sb)):
                label[side] = next_label
                parents.append(here)
                children.append(next_label)
                lambdas.append(lv)
                sizes.append(s)
                next_label += 1
            stack.extend((b, a))
        else:
            for side, s in ((a, sa), (b, sb)):
                if s >= min_cluster_size:
                    label[side] = here
                    stack.append(side)
                else:
                    for p in sorted(leaves(side)):
                        parents.append(here)
                        children.append(p)
                        lambdas.append(lv)
                        sizes.append(1)

    tree = CondensedTree(
        np.array(parents, dtype=np.int64), np.array(children, dtype=np.int64),
        np.array(lambdas), np.array(sizes, dtype=np.int64), n,
    )
    tree.stability = compute_stability(tree)
    return tree


def compute_stability(tree: CondensedTree) -> dict[int, float]:
    birth = {tree.root: 0.0}
    for c, lv, s in zip(tree.child, tree.lambda_val, tree.child_size):
        if c >= tree.n_points:
            birth[int(c)] = float(lv)
    stability = {c: 0.0 for c in birth}
    for p, lv, s in zip(tree.parent, tree.lambda_val, tree.child_size):
        stability[int(p)] += (float(lv) - birth[int(p)]) * int(s)
    return stability


@dataclass
class ClusterLabeling:
    labels: np.ndarray
    n_clusters: int
    sizes: list[int]

    @property
    def n_noise(self) -> int:
        return int((self.labels == -1).sum())

    @classmethod
    def from_labels(cls, labels) -> "ClusterLabeling":
        labels = np.asarray(labels, dtype=np.int64)
        k = int(labels.max()) + 1 if len(labels) and labels.max() >= 0 else 0
        sizes = [int((labels == c).sum()) for c in range(k)]
        return cls(labels, k, sizes)

    def save(self, path, patient_index) -> None:
        lines = ["patient_id,cluster_label"]
        lines += [f"{pid},{int(lab)}" for pid, lab in zip(patient_index, self.labels)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> tuple[list[str], "ClusterLabeling"]:
        rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
        ids = [r.split(",")[0] for r in rows]
        return ids, ClusterLabeling.from_labels([int(r.split(",")[1]) for r in rows])


def extract_clusters_eom(tree: CondensedTree) -> ClusterLabeling:
    """Excess-of-mass selection; the root is never selected."""
    n = tree.n_points
    stability = tree.stability or compute_stability(tree)
    cluster_children: dict[int, list[int]] = {c: [] for c in stability}
    birth = {tree.root: 0.0}
    for p, c, lv in zip(tree.parent, tree.child, tree.lambda_val):
        if c >= n:
            cluster_children[int(p)].append(int(c))
            birth[int(c)] = float(lv)

    selected: dict[int, bool] = {}
    subtree: dict[int, float] = {}
    for c in sorted(stability, reverse=True):
        kids = cluster_children[c]
        if c == tree.root:
            selected[c] = False
            continue
        if not kids:
            selected[c] = True
            subtree[c] = stability[c]
            continue
        child_sum = sum(subtree[k] for k in kids)
        if stability[c] > child_sum:
            selected[c] = True
            subtree[c] = stability[c]
            stack = list(kids)
            while stack:
                k = stack.pop()
                selected[k] = False
                stack.extend(cluster_children[k])
        else:
            selected[c] = False
            subtree[c] = child_sum

    chosen = sorted((c for c, s in selected.items() if s), key=lambda c: (birth[c], c))
    labels = np.full(n, -1, dtype=np.int64)
    owner = {c: i for i, c in enumerate(chosen)}
    # map every cluster node to its selected ancestor (if any), parents before children
    parent_of = {int(c): int(p) for p, c in zip(tree.parent, tree.child) if c >= n}
    resolved: dict[int, int] = {tree.root: -1}
    for c in sorted(stability):
        if c == tree.root:
            continue
        resolved[c] = owner[c] if c in owner else resolved[parent_of[c]]
    for p, c in zip(tree.parent, tree.child):
        if c < n:
            labels[int(c)] = resolved[int(p)]
    return ClusterLabeling.from_labels(labels)


@dataclass
class HDBSCANResult:
    labeling: ClusterLabeling
    tree: CondensedTree
    core: np.ndarray
    mst: np.ndarray


def hdbscan(data, min_samples: int = 60, min_cluster_size: int = 60,
            metric: str = "euclidean") -> HDBSCANResult:
    """Cluster points (or a precomputed matrix) and return labels and tree."""
    d = _as_distances(data, metric)
    n = d.shape[0]
    if n == 0:
        raise ValueError("no points to cluster")
    if n == 1:
        tree = condense_tree(np.empty((0, 3)), max(min_cluster_size, 2), n=1)
        return HDBSCANResult(ClusterLabeling.from_labels([-1]), tree, np.zeros(1), np.empty((0, 3)))
    core = core_distances(d, min(min_samples, n - 1), metric="precomputed")
    mst = build_mst(mutual_reachability(d, core))
    tree = condense_tree(mst, min_cluster_size, n)
    return HDBSCANResult(extract_clusters_eom(tree), tree, core, mst)
