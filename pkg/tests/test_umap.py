import math

import numpy as np
import pytest
import scipy.sparse
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq, curve_fit
from scipy.spatial.distance import cdist

from oracles import trustworthiness_ranks, two_blobs
from trajrisk import umap
from trajrisk.dtw import DistanceMatrix


def _membership(d, rho, sigma):
    return sum(math.exp(-max(0.0, x - rho) / sigma) for x in d)


def test_smooth_knn_example_against_root_finder():
    rho, sigma, degenerate = umap.smooth_knn([1.0, 2.0, 3.0])
    target = math.log2(3)
    expected = brentq(lambda s: 1 + math.exp(-1 / s) + math.exp(-2 / s) - target, 1e-6, 100)
    assert rho == 1.0 and not degenerate
    assert sigma == pytest.approx(expected, rel=1e-9)


def test_nearest_neighbour_membership_is_one():
    rho, sigma, _ = umap.smooth_knn([0.5, 0.7, 2.0, 4.0])
    assert math.exp(-max(0.0, 0.5 - rho) / sigma) == 1.0


def test_all_equal_distances_flagged():
    rho, _, degenerate = umap.smooth_knn([2.0] * 5)
    assert rho == 2.0 and degenerate


def test_smooth_knn_rejects_bad_input():
    with pytest.raises(ValueError):
        umap.smooth_knn([1.0])
    with pytest.raises(ValueError):
        umap.smooth_knn([2.0, 1.0])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.0, 1e3, allow_nan=False), min_size=2, max_size=30))
def test_calibration_hits_log2_k(dists):
    d = sorted(dists)
    rho, sigma, degenerate = umap.smooth_knn(d)
    if not degenerate:
        assert _membership(d, rho, sigma) == pytest.approx(math.log2(len(d)), abs=1e-5)


def test_fuzzy_union_hand_values():
    directed = scipy.sparse.csr_matrix(np.array([[0, 1.0, 0.5], [1.0, 0, 0], [0, 0, 0]]))
    union = umap.fuzzy_union(directed).toarray()
    assert union[0, 1] == 1.0 and union[1, 0] == 1.0
    assert union[0, 2] == 0.5 and union[2, 0] == 0.5


def _brute_graph(d, k):
    n = len(d)
    directed = np.zeros((n, n))
    for i in range(n):
        order = sorted((j for j in range(n) if j != i), key=lambda j: (d[i, j], j))[:k]
        nd = [d[i, j] for j in order]
        rho, sigma, _ = umap.smooth_knn(nd)
        for j in order:
            directed[i, j] = math.exp(-max(0.0, d[i, j] - rho) / sigma)
    return directed + directed.T - directed * directed.T


def test_graph_matches_brute_force(rng):
    pts = rng.normal(size=(25, 3))
    d = cdist(pts, pts)
    d[3, 7] = d[7, 3] = d[3, 8]  # a tie resolved by index
    graph = umap.fuzzy_simplicial_set(d, k=5)
    np.testing.assert_allclose(graph.weights.toarray(), _brute_graph(d, 5), atol=1e-12)


def test_graph_symmetric_and_bounded(rng):
    pts = rng.normal(size=(40, 2))
    graph = umap.fuzzy_simplicial_set(cdist(pts, pts), k=7)
    w = graph.weights
    assert (w != w.T).nnz == 0
    assert w.data.min() > 0 and w.data.max() <= 1
    assert all(0 < wt <= 1 for _, _, wt in graph.edges())


@pytest.mark.parametrize("k", [1, 10])
def test_graph_k_range(k):
    with pytest.raises(ValueError):
        umap.fuzzy_simplicial_set(np.zeros((10, 10)), k=k)


def test_curve_params_match_independent_fit():
    a, b = umap.fit_curve_params(0.1, 1.0)
    x = np.linspace(0, 3, 300)
    y = np.where(x <= 0.1, 1.0, np.exp(-(x - 0.1)))
    (ra, rb), _ = curve_fit(lambda x, a, b: 1 / (1 + a * x ** (2 * b)), x, y, p0=(1, 1))
    assert a == pytest.approx(ra, abs=1e-4) and b == pytest.approx(rb, abs=1e-4)
    assert a == pytest.approx(1.58, abs=0.02) and b == pytest.approx(0.90, abs=0.02)


def test_curve_value_and_residual():
    a, b = umap.fit_curve_params(0.1, 1.0)
    assert 1.0 / (1.0 + a * 0.0 ** (2 * b)) == 1.0
    x = np.linspace(0, 3, 300)
    y = np.where(x <= 0.1, 1.0, np.exp(-(x - 0.1)))
    fitted = umap._curve_residual((a, b), x, y)
    start = umap._curve_residual((1.0, 1.0), x, y)
    assert fitted @ fitted <= start @ start


def test_curve_params_precondition():
    with pytest.raises(ValueError):
        umap.fit_curve_params(1.0, 1.0)


def test_zero_edge_graph_only_rescales():
    n = 6
    empty = scipy.sparse.csr_matrix((n, n))
    graph = umap.FuzzyGraph(empty, np.zeros(n), np.ones(n), np.zeros(n, bool),
                            np.zeros((n, 2), int), np.zeros((n, 2)))
    emb = umap.optimize_embedding(graph, seed=3, a=1.5, b=0.9)
    init = np.random.default_rng(3).uniform(-10.0, 10.0, (n, 2))
    expected = 10.0 * (init - init.min(0)) / (init.max(0) - init.min(0))
    np.testing.assert_allclose(emb.coordinates, expected, atol=1e-12)


@pytest.fixture(scope="module")
def blobs():
    pts, labels = two_blobs(n_per=50, gap=10.0, spread=1.0, seed=2)
    d = cdist(pts, pts)
    emb = umap.embed(d, k=15, n_epochs=200, seed=11)
    return d, labels, emb


def test_blobs_separate(blobs):
    _, labels, emb = blobs
    low = cdist(emb.coordinates, emb.coordinates)
    same = labels[:, None] == labels[None, :]
    separated = []
    for i in range(len(labels)):
        own = low[i, same[i]].max()
        other = low[i, ~same[i]].min()
        separated.append(other > own)
    assert np.mean(separated) >= 0.95


def test_embedding_finite_and_deterministic(blobs):
    d, _, emb = blobs
    again = umap.embed(d, k=15, n_epochs=200, seed=11)
    assert np.isfinite(emb.coordinates).all()
    assert emb.coordinates.tobytes() == again.coordinates.tobytes()
    other = umap.embed(d, k=15, n_epochs=200, seed=12)
    assert not np.array_equal(emb.coordinates, other.coordinates)


def test_trustworthiness_high_and_matches_oracle(blobs):
    d, _, emb = blobs
    t = umap.trustworthiness(d, emb.coordinates, k=15)
    assert t == pytest.approx(trustworthiness_ranks(d, emb.coordinates, 15), abs=1e-12)
    assert t >= 0.90


def test_embedding_file_round_trip(tmp_path, rng):
    pts = rng.normal(size=(20, 2))
    dm = DistanceMatrix(cdist(pts, pts), "total", tuple(f"p{i}" for i in range(20)))
    emb = umap.embed(dm, k=5, n_epochs=50, seed=1)
    path = tmp_path / "embedding.csv"
    emb.save(path)
    text = path.read_text()
    assert text.startswith("# ") and "patient_id,x,y" in text
    back = umap.Embedding.load(path)
    assert back.patient_index == dm.patient_index
    assert back.coordinates.tobytes() == emb.coordinates.tobytes()
    assert back.params["k"] == 5 and back.params["seed"] == 1


def test_disconnected_components_stay_finite(rng):
    a = rng.normal(size=(15, 2))
    b = rng.normal(size=(15, 2)) + 1e6
    pts = np.vstack([a, b])
    emb = umap.embed(cdist(pts, pts), k=4, n_epochs=50, seed=0, dims=3)
    assert emb.coordinates.shape == (30, 3) and np.isfinite(emb.coordinates).all()
