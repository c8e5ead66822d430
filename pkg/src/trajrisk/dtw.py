"""Independent dynamic time warping distances between patient trajectories.

Local cost is the absolute difference; the cumulative cost is kept in two
rolling rows since only the final value is needed.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numba import njit, prange
from numba.core.errors import NumbaWarning

from .cohort import FEATURES, VitalTrajectory

# an old system TBB only triggers a fallback to another threading layer
warnings.filterwarnings("ignore", message="The TBB threading layer", category=NumbaWarning)

MAGIC = b"TCDM"
FORMAT_VERSION = 1
_NO_BAND = -1


@njit(cache=True)
def _dtw(a, b, band):
    n = a.shape[0]
    m = b.shape[0]
    inf = np.inf
    prev = np.full(m + 1, inf)
    curr = np.full(m + 1, inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        if band >= 0:
            lo = max(1, i - band)
            hi = min(m, i + band)
        else:
            lo = 1
            hi = m
        ai = a[i - 1]
        curr[lo - 1] = inf
        left = inf
        diag = prev[lo - 1]
        for j in range(lo, hi + 1):
            up = prev[j]
            best = up
            if left < best:
                best = left
            if diag < best:
                best = diag
            left = abs(ai - b[j - 1]) + best
            curr[j] = left
            diag = up
        if hi < m:
            # the next row may read one cell past this band
            curr[hi + 1] = inf
        prev, curr = curr, prev
    return prev[m]


def dtw_distance(a: Sequence[float], b: Sequence[float], band: int | None = None) -> float:
    """DTW cost between two sequences with absolute-difference local cost.

    ``band`` is a Sakoe-Chiba half-width in samples; None means unconstrained.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("sequences must be one-dimensional")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sequence")
    if band is not None:
        if band < abs(len(a) - len(b)):
            raise ValueError(f"band {band} too narrow for lengths {len(a)} and {len(b)}")
        return float(_dtw(a, b, int(band)))
    return float(_dtw(a, b, _NO_BAND))


@njit(cache=True)
def _pairs_serial(flat, offsets, rows, cols, band, out):
    for p in range(rows.shape[0]):
        i = rows[p]
        j = cols[p]
        out[p] = _dtw(flat[offsets[i]:offsets[i + 1]], flat[offsets[j]:offsets[j + 1]], band)


@njit(cache=True, parallel=True)
def _pairs_parallel(flat, offsets, rows, cols, band, out, chunk):
    n_chunks = (rows.shape[0] + chunk - 1) // chunk
    for c in prange(n_chunks):
        stop = min((c + 1) * chunk, rows.shape[0])
        for p in range(c * chunk, stop):
            i = rows[p]
            j = cols[p]
            out[p] = _dtw(flat[offsets[i]:offsets[i + 1]], flat[offsets[j]:offsets[j + 1]], band)


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    feature_tag: str
    patient_index: tuple[str, ...]

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def save(self, path) -> None:
        """Write the binary matrix file and its ``.index`` sidecar."""
        path = Path(path)
        tag = self.feature_tag.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", FORMAT_VERSION, self.n, len(tag)))
            fh.write(tag)
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        index_path(path).write_text("".join(f"{pid}\n" for pid in self.patient_index), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DistanceMatrix":
        path = Path(path)
        data = path.read_bytes()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a distance matrix file")
        version, n, tag_len = struct.unpack("<III", data[4:16])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        tag = data[16:16 + tag_len].decode("utf-8")
        body = data[16 + tag_len:]
        if len(body) != 8 * n * n:
            raise ValueError(f"{path}: truncated matrix body")
        values = np.frombuffer(body, dtype="<f8").reshape(n, n).astype(np.float64)
        ids = tuple(index_path(path).read_text(encoding="utf-8").splitlines())
        if len(ids) != n:
            raise ValueError(f"{path}: index sidecar has {len(ids)} ids for n={n}")
        return cls(values, tag, ids)


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index")


def _pack(series: list[np.ndarray]):
    offsets = np.zeros(len(series) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in series])
    flat = np.concatenate(series).astype(np.float64) if series else np.zeros(0)
    return flat, offsets


def pairwise_dtw(series: list[np.ndarray], band: int | None = None, parallel: bool = False,
                 chunk: int = 256) -> np.ndarray:
    """Symmetric matrix of DTW costs over the upper triangle of ``series``."""
    n = len(series)
    for s in series:
        if len(s) == 0:
            raise ValueError("empty sequence in pairwise input")
    if band is not None:
        longest, shortest = max(map(len, series)), min(map(len, series))
        if band < longest - shortest:
            raise ValueError(f"band {band} too narrow for length spread {longest - shortest}")
    flat, offsets = _pack(series)
    rows, cols = np.triu_indices(n, k=1)
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    out = np.empty(len(rows))
    b = _NO_BAND if band is None else int(band)
    if parallel:
        _pairs_parallel(flat, offsets, rows, cols, b, out, chunk)
    else:
        _pairs_serial(flat, offsets, rows, cols, b, out)
    values = np.zeros((n, n))
    values[rows, cols] = out
    values[cols, rows] = out
    return values


def feature_distance_matrix(trajectories: Mapping[str, VitalTrajectory], feature: str,
                            band: int | None = None, parallel: bool = False) -> DistanceMatrix:
    """Pairwise DTW over one feature for every patient in ``trajectories``."""
    if feature not in FEATURES:
        raise ValueError(f"unknown feature {feature!r}")
    ids = tuple(trajectories)
    series = []
    for pid in ids:
        s = trajectories[pid].feature(feature)
        if len(s) == 0:
            raise ValueError(f"patient {pid} has no {feature} trajectory")
        series.append(np.ascontiguousarray(s, dtype=np.float64))
    return DistanceMatrix(pairwise_dtw(series, band=band, parallel=parallel), feature, ids)


def total_distance_matrix(matrices: Sequence[DistanceMatrix]) -> DistanceMatrix:
    """Element-wise sum of per-feature matrices sharing the same patient order."""
    if not matrices:
        raise ValueError("no matrices to sum")
    first = matrices[0]
    total = np.zeros_like(first.values)
    for m in matrices:
        if m.values.shape != first.values.shape:
            raise ValueError("distance matrices differ in size")
        if m.patient_index != first.patient_index:
            raise ValueError("distance matrices differ in patient order")
        total += m.values
    return DistanceMatrix(total, "total", first.patient_index)


def all_feature_matrices(trajectories: Mapping[str, VitalTrajectory], band: int | None = None,
                         parallel: bool = False) -> list[DistanceMatrix]:
    return [feature_distance_matrix(trajectories, f, band=band, parallel=parallel) for f in FEATURES]
