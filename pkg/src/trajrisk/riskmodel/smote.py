"""SMOTE-NC oversampling for mixed continuous/nominal features."""
from __future__ import annotations

import numpy as np
import pandas as pd


def _neighbors(z: np.ndarray, nominal: np.ndarray, penalty: float, k: int) -> np.ndarray:
    n = len(z)
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1) if z.shape[1] else np.zeros((n, n))
    if nominal.shape[1]:
        mismatch = (nominal[:, None, :] != nominal[None, :, :]).sum(-1)
        d2 = d2 + penalty ** 2 * mismatch
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def _vote(values: np.ndarray, rng) -> object:
    uniques, counts = np.unique(values, return_counts=True)
    tied = uniques[counts == counts.max()]
    return tied[0] if len(tied) == 1 else tied[int(rng.integers(len(tied)))]


def smote_nc(X: pd.DataFrame, y, categorical=(), k_neighbors: int = 5, seed: int = 0):
    """Oversample the minority class of ``(X, y)`` to parity.

    Continuous columns are standardized for the neighbour search; each
    mismatched nominal column adds the median of the minority class's
    standardized standard deviations to the distance. New rows interpolate
    continuous values toward a random one of the k nearest minority
    neighbours and take nominal values by majority vote of those neighbours.
    Synthetic rows are appended after the originals.
    """
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) != 2:
        raise ValueError("SMOTE-NC needs exactly two classes")
    if counts[0] == counts[1]:
        return X.reset_index(drop=True).copy(), y.copy()
    minority = classes[int(np.argmin(counts))]
    n_min, n_maj = counts.min(), counts.max()
    if n_min <= k_neighbors:
        raise ValueError(f"minority class has {n_min} samples, need more than k_neighbors={k_neighbors}")

    categorical = [c for c in X.columns if c in set(categorical)]
    continuous = [c for c in X.columns if c not in set(categorical)]
    cont = X[continuous].to_numpy(dtype=np.float64)
    nom = X[categorical].to_numpy(dtype=object)
    sd = cont.std(axis=0)
    sd[sd == 0] = 1.0
    z = (cont - cont.mean(axis=0)) / sd

    idx = np.flatnonzero(y == minority)
    z_min = z[idx]
    penalty = float(np.median(z_min.std(axis=0))) if len(continuous) else 1.0
    nn = _neighbors(z_min, nom[idx], penalty, k_neighbors)

    rng = np.random.default_rng(seed)
    n_new = int(n_maj - n_min)
    base = rng.integers(n_min, size=n_new)
    pick = rng.integers(k_neighbors, size=n_new)
    lam = rng.random(n_new)
    partner = nn[base, pick]
    start, end = cont[idx[base]], cont[idx[partner]]
    new_cont = np.clip(start + lam[:, None] * (end - start), np.minimum(start, end), np.maximum(start, end))
    new_nom = np.empty((n_new, len(categorical)), dtype=object)
    for s in range(n_new):
        neigh = nom[idx[nn[base[s]]]]
        for c in range(len(categorical)):
            new_nom[s, c] = _vote(neigh[:, c], rng)

    synthetic = pd.DataFrame(new_cont, columns=continuous)
    for c, name in enumerate(categorical):
        synthetic[name] = new_nom[:, c]
    out = pd.concat([X.reset_index(drop=True), synthetic[X.columns]], ignore_index=True)
    for name in continuous:
        out[name] = out[name].astype(np.float64)
    return out, np.concatenate([y, np.full(n_new, minority, dtype=y.dtype)])
