"""UMAP embedding from a precomputed distance matrix.

Exact k-nearest neighbours are read off the dense matrix, turned into a
fuzzy graph by smooth-kNN calibration and fuzzy union, and laid out by
negative-sampling SGD. Layout is single-threaded and seeded, so a fixed
seed reproduces the coordinates exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph
import scipy.sparse.linalg
from numba import njit

logger = logging.getLogger(__name__)

SIGMA_BRACKET = (1e-12, 1e4)
SMOOTH_KNN_ITERATIONS = 64
SPECTRAL_INIT_MAX_N = 4000
DENSE_EIGH_MAX_N = 1500


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# fuzzy graph


def _membership_sum(d: np.ndarray, rho: float, sigma: float) -> float:
    return float(np.exp(-np.maximum(0.0, d - rho) / sigma).sum())


def smooth_knn(neighbor_distances) -> tuple[float, float, bool]:
    """Calibrate one point's neighbourhood.

    Returns ``(rho, sigma, degenerate)``: ``rho`` is the smallest positive
    neighbour distance and ``sigma`` makes the membership sum equal
    ``log2(k)``. ``degenerate`` is set when no sigma can reach the target,
    e.g. when every distance equals ``rho``.
    """
    d = np.asarray(neighbor_distances, dtype=np.float64)
    k = len(d)
    if k < 2:
        raise ValueError("smooth_knn needs at least 2 neighbours")
    if np.any(d < 0) or np.any(np.diff(d) < 0):
        raise ValueError("neighbour distances must be non-negative and sorted")
    positive = d[d > 0]
    rho = float(positive[0]) if len(positive) else 0.0
    target = math.log2(k)

    lo, hi = SIGMA_BRACKET
    # very large distances need a wider bracket than the default
    while _membership_sum(d, rho, hi) < target and hi < 1e300:
        hi *= 10.0
    degenerate = _membership_sum(d, rho, lo) >= target or _membership_sum(d, rho, hi) < target
    mid = 0.5 * (lo + hi)
    for _ in range(SMOOTH_KNN_ITERATIONS):
        mid = 0.5 * (lo + hi)
        if _membership_sum(d, rho, mid) > target:
            hi = mid
        else:
            lo = mid
    return rho, mid, bool(degenerate)


@dataclass
class FuzzyGraph:
    """Symmetric fuzzy membership graph; ``weights`` is a CSR matrix."""

    weights: scipy.sparse.csr_matrix
    rho: np.ndarray
    sigma: np.ndarray
    degenerate: np.ndarray
    knn_indices: np.ndarray
    knn_distances: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def edges(self):
        coo = scipy.sparse.triu(self.weights, k=1).tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))


def exact_knn(distances: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbours per row, self excluded, ties to the lower index."""
    n = distances.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for i in range(n):
        row = distances[i].copy()
        row[i] = np.inf
        order = np.argsort(row, kind="stable")[:k]
        idx[i] = order
        dist[i] = row[order]
    return idx, dist


def fuzzy_union(directed: scipy.sparse.csr_matrix) -> scipy.sparse.csr_matrix:
    transpose = directed.T.tocsr()
    product = directed.multiply(transpose)
    union = (directed + transpose - product).tocsr()
    union.eliminate_zeros()
    union.sort_indices()
    return union


def fuzzy_simplicial_set(distances, k: int = 15) -> FuzzyGraph:
    """Build the symmetric fuzzy graph from a dense distance matrix."""
    d = np.asarray(getattr(distances, "values", distances), dtype=np.float64)
    n = d.shape[0]
    if not 2 <= k < n:
        raise ValueError(f"k must satisfy 2 <= k < n (k={k}, n={n})")
    idx, dist = exact_knn(d, k)
    rho = np.empty(n)
    sigma = np.empty(n)
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        rho[i], sigma[i], degenerate[i] = smooth_knn(dist[i])
    w = np.exp(-np.maximum(0.0, dist - rho[:, None]) / sigma[:, None])
    rows = np.repeat(np.arange(n), k)
    directed = scipy.sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))
    directed.eliminate_zeros()
    if degenerate.any():
        logger.info("%d points with degenerate neighbourhoods", int(degenerate.sum()))
    return FuzzyGraph(fuzzy_union(directed), rho, sigma, degenerate, idx, dist)


# ---------------------------------------------------------------------------
# curve parameters


def _curve_residual(params, x, y):
    a, b = params
    return 1.0 / (1.0 + a * x ** (2 * b)) - y


def fit_curve_params(min_dist: float = 0.1, spread: float = 1.0,
                     max_iter: int = 200, patience: int = 20) -> tuple[float, float]:
    """Fit ``1 / (1 + a x^(2b))`` to the offset-exponential target curve.

    Damped Gauss-Newton (Levenberg-Marquardt) from ``(1, 1)`` on 300 points
    in ``[0, 3 * spread]``.
    """
    if not 0 < min_dist < spread:
        raise ValueError("need 0 < min_dist < spread")
    x = np.linspace(0.0, 3 * spread, 300)
    y = np.where(x <= min_dist, 1.0, np.exp(-(x - min_dist) / spread))
    params = np.array([1.0, 1.0])
    r = _curve_residual(params, x, y)
    cost = float(r @ r)
    damping = 1e-3
    stalled = 0
    positive = x > 0
    log_x = np.zeros_like(x)
    log_x[positive] = np.log(x[positive])
    for _ in range(max_iter):
        a, b = params
        p = np.zeros_like(x)
        p[positive] = x[positive] ** (2 * b)
        denom = (1.0 + a * p) ** 2
        jac = np.column_stack([-p / denom, -a * p * 2 * log_x / denom])
        grad = jac.T @ r
        if np.abs(grad).max() < 1e-12:
            break
        jtj = jac.T @ jac
        step = np.linalg.solve(jtj + damping * np.diag(np.diag(jtj)), -grad)
        trial = params + step
        if trial[0] > 0 and trial[1] > 0:
            r_trial = _curve_residual(trial, x, y)
            cost_trial = float(r_trial @ r_trial)
        else:
            cost_trial = np.inf
        if cost_trial < cost:
            converged = cost - cost_trial <= 1e-15 * max(cost, 1e-300)
            params, r, cost = trial, r_trial, cost_trial
            damping = max(damping / 10.0, 1e-12)
            stalled = 0
            if converged:
                break
        else:
            damping *= 10.0
            stalled += 1
            if stalled >= patience:
                if np.abs(grad).max() < 1e-6:
                    break
                raise ConvergenceError("curve fit residual stopped decreasing")
    return float(params[0]), float(params[1])


# ---------------------------------------------------------------------------
# layout


def _component_spectral(weights: scipy.sparse.csr_matrix, dims: int, rng) -> np.ndarray:
    n = weights.shape[0]
    if n <= dims + 1:
        return rng.uniform(-1.0, 1.0, (n, dims))
    degree = np.asarray(weights.sum(axis=1)).ravel()
    inv_sqrt = scipy.sparse.diags(1.0 / np.sqrt(degree))
    lap = scipy.sparse.identity(n) - inv_sqrt @ weights @ inv_sqrt
    if n <= DENSE_EIGH_MAX_N:
        _, vecs = scipy.linalg.eigh(lap.toarray(), subset_by_index=[0, dims])
    else:
        _, vecs = scipy.sparse.linalg.eigsh(
            lap, k=dims + 1, which="SM", tol=1e-4, v0=np.ones(n), maxiter=n * 5,
        )
    coords = vecs[:, 1:dims + 1]
    # fix eigenvector sign for reproducibility
    signs = np.sign(coords[np.argmax(np.abs(coords), axis=0), np.arange(dims)])
    signs[signs == 0] = 1.0
    return coords * signs


def spectral_layout(weights: scipy.sparse.csr_matrix, dims: int, rng) -> np.ndarray:
    """Laplacian eigenmap; disconnected components are laid out separately
    and placed at seeded anchor positions."""
    n = weights.shape[0]
    n_comp, comp = scipy.sparse.csgraph.connected_components(weights, directed=False)
    if n_comp == 1:
        return _component_spectral(weights, dims, rng)
    coords = np.zeros((n, dims))
    anchors = rng.normal(0.0, 1.0, (n_comp, dims))
    anchors *= 10.0 / max(np.abs(anchors).max(), 1e-12)
    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        sub = weights[members][:, members]
        local = _component_spectral(sub, dims, rng) if len(members) > 1 else np.zeros((1, dims))
        span = np.abs(local).max()
        if span > 0:
            local = local / span
        coords[members] = local + anchors[c]
    return coords


@njit(cache=True)
def _tau_rand_int(state):
    state[0] = (((state[0] & 4294967294) << 12) & 0xFFFFFFFF) ^ ((((state[0] << 13) & 0xFFFFFFFF) ^ state[0]) >> 19)
    state[1] = (((state[1] & 4294967288) << 4) & 0xFFFFFFFF) ^ ((((state[1] << 2) & 0xFFFFFFFF) ^ state[1]) >> 25)
    state[2] = (((state[2] & 4294967280) << 17) & 0xFFFFFFFF) ^ ((((state[2] << 3) & 0xFFFFFFFF) ^ state[2]) >> 11)
    return state[0] ^ state[1] ^ state[2]


@njit(cache=True)
def _clip(v):
    if v > 4.0:
        return 4.0
    if v < -4.0:
        return -4.0
    return v


@njit(cache=True)
def _sgd(coords, head, tail, epochs_per_sample, a, b, n_epochs, negative_sample_rate,
         initial_alpha, rng_state):
    n = coords.shape[0]
    dim = coords.shape[1]
    n_edges = head.shape[0]
    epochs_per_negative = epochs_per_sample / negative_sample_rate
    next_sample = epochs_per_sample.copy()
    next_negative = epochs_per_negative.copy()
    for epoch in range(n_epochs):
        alpha = initial_alpha * (1.0 - epoch / n_epochs)
        for e in range(n_edges):
            if next_sample[e] > epoch:
                continue
            i = head[e]
            j = tail[e]
            dist2 = 0.0
            for d in range(dim):
                diff = coords[i, d] - coords[j, d]
                dist2 += diff * diff
            if dist2 > 0.0:
                coeff = -2.0 * a * b * dist2 ** (b - 1.0) / (a * dist2 ** b + 1.0)
            else:
                coeff = 0.0
            for d in range(dim):
                g = _clip(coeff * (coords[i, d] - coords[j, d]))
                coords[i, d] += g * alpha
                coords[j, d] -= g * alpha
            next_sample[e] += epochs_per_sample[e]

            n_neg = int((epoch - next_negative[e]) / epochs_per_negative[e])
            for _ in range(n_neg):
                k = _tau_rand_int(rng_state) % n
                if k == i:
                    continue
                dist2 = 0.0
                for d in range(dim):
                    diff = coords[i, d] - coords[k, d]
                    dist2 += diff * diff
                if dist2 > 0.0:
                    coeff = 2.0 * b / ((0.001 + dist2) * (a * dist2 ** b + 1.0))
                else:
                    coeff = 0.0
                for d in range(dim):
                    if coeff > 0.0:
                        g = _clip(coeff * (coords[i, d] - coords[k, d]))
                    else:
                        g = 4.0
                    coords[i, d] += g * alpha
            next_negative[e] += n_neg * epochs_per_negative[e]
    return coords


@dataclass(frozen=True)
class Embedding:
    coordinates: np.ndarray
    params: dict = field(default_factory=dict)
    patient_index: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.coordinates.shape[0]

    @property
    def dims(self) -> int:
        return self.coordinates.shape[1]

    def save(self, path) -> None:
        axes = ["x", "y", "z"] + [f"dim{d}" for d in range(3, self.dims)]
        header = " ".join(f"{k}={self.params[k]!r}" for k in sorted(self.params))
        lines = [f"# {header}", ",".join(["patient_id"] + axes[:self.dims])]
        ids = self.patient_index or tuple(str(i) for i in range(self.n))
        for pid, row in zip(ids, self.coordinates):
            lines.append(",".join([pid] + [repr(float(v)) for v in row]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Embedding":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        params = {}
        if lines and lines[0].startswith("#"):
            for item in lines[0][1:].split():
                key, _, value = item.partition("=")
                try:
                    params[key] = float(value) if "." in value or "e" in value else int(value)
                except ValueError:
                    params[key] = value.strip("'\"")
            lines = lines[1:]
        ids, rows = [], []
        for line in lines[1:]:
            parts = line.split(",")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
        return cls(np.array(rows), params, tuple(ids))


def optimize_embedding(graph: FuzzyGraph, dims: int = 2, n_epochs: int = 500,
                       negative_sample_rate: int = 5, initial_learning_rate: float = 1.0,
                       seed: int = 0, a: float | None = None, b: float | None = None,
                       min_dist: float = 0.1, spread: float = 1.0) -> Embedding:
    if dims < 1:
        raise ValueError("dims must be >= 1")
    if a is None or b is None:
        a, b = fit_curve_params(min_dist, spread)
    rng = np.random.default_rng(seed)
    weights = graph.weights.tocoo()
    n = graph.n
    if n <= SPECTRAL_INIT_MAX_N and weights.nnz > 0:
        init = spectral_layout(graph.weights, dims, rng)
    else:
        init = rng.uniform(-10.0, 10.0, (n, dims))
    # rescale to [0, 10] per axis
    lo = init.min(axis=0)
    span = init.max(axis=0) - lo
    span[span == 0] = 1.0
    coords = np.ascontiguousarray(10.0 * (init - lo) / span)

    if weights.nnz > 0 and n_epochs > 0:
        w = weights.data
        keep = w >= w.max() / n_epochs
        head = weights.row[keep].astype(np.int64)
        tail = weights.col[keep].astype(np.int64)
        w = w[keep]
        epochs_per_sample = w.max() / w
        rng_state = rng.integers(1, 2**31 - 1, 3).astype(np.int64)
        # the xorshift needs seeds above its shift masks
        rng_state += 256
        coords = _sgd(coords, head, tail, epochs_per_sample, float(a), float(b), int(n_epochs),
                      float(negative_sample_rate), float(initial_learning_rate), rng_state)
    params = {"dims": dims, "n_epochs": n_epochs, "a": float(a), "b": float(b), "seed": seed,
              "negative_sample_rate": negative_sample_rate, "min_dist": min_dist}
    return Embedding(coords, params)


def embed(distances, k: int = 15, dims: int = 2, n_epochs: int = 500, min_dist: float = 0.1,
          spread: float = 1.0, seed: int = 0) -> Embedding:
    """Fuzzy graph plus layout for a dense distance matrix."""
    graph = fuzzy_simplicial_set(distances, k)
    a, b = fit_curve_params(min_dist, spread)
    emb = optimize_embedding(graph, dims=dims, n_epochs=n_epochs, seed=seed, a=a, b=b,
                             min_dist=min_dist, spread=spread)
    params = dict(emb.params, k=k)
    ids = tuple(getattr(distances, "patient_index", ()))
    return Embedding(emb.coordinates, params, ids)


def trustworthiness(high_distances: np.ndarray, low_coords: np.ndarray, k: int = 15) -> float:
    """How well embedded neighbourhoods are neighbourhoods in the original space."""
    d = np.asarray(high_distances, dtype=float)
    n = d.shape[0]
    if not 1 <= k < n / 2:
        raise ValueError("k must be in [1, n/2)")
    high = d.copy()
    np.fill_diagonal(high, np.inf)
    order = np.argsort(high, axis=1, kind="stable")
    ranks = np.empty_like(order)
    ranks[np.arange(n)[:, None], order] = np.arange(1, n + 1)
    diff = low_coords[:, None, :] - low_coords[None, :, :]
    low = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(low, np.inf)
    low_nn = np.argsort(low, axis=1, kind="stable")[:, :k]
    penalty = ranks[np.arange(n)[:, None], low_nn] - k
    total = penalty[penalty > 0].sum()
    return float(1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * total)
