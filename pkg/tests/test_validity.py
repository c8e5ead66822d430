import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (ari_pairs, best_mapping_bruteforce, calinski_harabasz_loop, davies_bouldin_loop,
                     silhouette_loop, two_blobs)
from trajrisk import validity as v

X = np.array([0.0, 1.0, 10.0, 11.0])
L = np.array([0, 0, 1, 1])


def test_hand_values():
    np.testing.assert_allclose(v.silhouette_samples(X, L), [9.5 / 10.5, 8.5 / 9.5, 8.5 / 9.5, 9.5 / 10.5])
    # s(0) = s(11) = 9.5/10.5 and s(1) = s(10) = 8.5/9.5: the points are not all equivalent
    assert v.silhouette(X, L) == pytest.approx((9.5 / 10.5 + 8.5 / 9.5) / 2, abs=1e-12)
    # centroids 0.5 and 10.5 about the grand mean 5.5: between SS = 2*25 + 2*25, within SS = 1
    assert v.calinski_harabasz(X, L) == pytest.approx(100.0 / (1.0 / 2), abs=1e-9)
    assert v.davies_bouldin(X, L) == pytest.approx(0.1, abs=1e-12)


def test_against_loop_oracles(rng):
    for seed in range(4):
        r = np.random.default_rng(seed)
        x = r.normal(size=(40, 2))
        lab = r.integers(0, 4, 40)
        assert v.silhouette(x, lab) == pytest.approx(silhouette_loop(x, lab), abs=1e-9)
        assert v.calinski_harabasz(x, lab) == pytest.approx(calinski_harabasz_loop(x, lab), rel=1e-9)
        assert v.davies_bouldin(x, lab) == pytest.approx(davies_bouldin_loop(x, lab), rel=1e-9)


def test_singleton_cluster_contributes_zero():
    x = np.array([0.0, 1.0, 5.0])
    lab = np.array([0, 0, 1])
    assert v.silhouette(x, lab) == pytest.approx(silhouette_loop(x, lab), abs=1e-12)


def test_coincident_clusters():
    x = np.zeros(6)
    lab = np.array([0, 0, 0, 1, 1, 1])
    assert v.silhouette(x, lab) <= 0
    assert v.calinski_harabasz(x, lab) == math.inf
    assert v.davies_bouldin(x, lab) == math.inf


def test_fewer_than_two_clusters_rejected():
    for fn in (v.silhouette, v.calinski_harabasz, v.davies_bouldin):
        with pytest.raises(ValueError):
            fn(X, np.zeros(4, int))
    with pytest.raises(ValueError):
        v.calinski_harabasz([0.0, 1.0], [0, 1])


def test_isometry_invariance(rng):
    x = rng.normal(size=(30, 2))
    lab = rng.integers(0, 3, 30)
    theta = 0.7
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    y = x @ rot.T + np.array([5.0, -3.0])
    for fn in (v.silhouette, v.calinski_harabasz, v.davies_bouldin):
        assert fn(y, lab) == pytest.approx(fn(x, lab), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=6, max_size=30), st.integers(0, 10_000))
def test_silhouette_bounded(labels, seed):
    lab = np.array(labels)
    if len(np.unique(lab)) < 2:
        return
    x = np.random.default_rng(seed).normal(size=(len(lab), 2))
    assert -1.0 <= v.silhouette(x, lab) <= 1.0


def test_ari_examples():
    assert v.adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert v.adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    a, b = [0, 0, 1, 1], [0, 1, 0, 1]
    assert v.adjusted_rand_index(a, b) == pytest.approx(ari_pairs(a, b), abs=1e-12)
    with pytest.raises(ValueError):
        v.adjusted_rand_index([0, 1], [0, 1, 2])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(-1, 3)), min_size=2, max_size=40),
       st.permutations(range(5)))
def test_ari_matches_pairs_and_is_permutation_invariant(pairs, perm):
    a = [p for p, _ in pairs]
    b = [q for _, q in pairs]
    got = v.adjusted_rand_index(a, b)
    assert got == pytest.approx(ari_pairs(a, b), abs=1e-9)
    assert v.adjusted_rand_index([perm[x] for x in a], b) == pytest.approx(got, abs=1e-12)


def test_match_labels_examples():
    ref = [0, 0, 1, 1, 2, 2]
    assert v.match_labels(ref, ref) == ({0: 0, 1: 1, 2: 2}, 1.0)
    mapping, frac = v.match_labels(ref, [1, 1, 0, 0, 2, 2])
    assert mapping == {1: 0, 0: 1, 2: 2} and frac == 1.0


def test_match_labels_one_reassigned():
    ref = [0] * 5 + [1] * 5
    other = [1] * 5 + [0] * 4 + [1]
    mapping, frac = v.match_labels(ref, other)
    assert mapping == {1: 0, 0: 1}
    assert frac == pytest.approx(0.9)


def test_match_labels_against_brute_force(rng):
    for _ in range(20):
        ref = rng.integers(-1, 4, 30)
        other = rng.integers(-1, 3, 30)
        mapping, frac = v.match_labels(ref, other)
        hits = sum(1 for r, o in zip(ref, other) if r >= 0 and o >= 0 and mapping.get(int(o)) == r)
        assert hits == best_mapping_bruteforce(ref.tolist(), other.tolist())
        assert frac == pytest.approx(hits / (ref >= 0).sum())
        assert -1 not in mapping


def test_match_labels_one_when_ari_one():
    a = np.array([0, 0, 1, 1, 2, 2, 2])
    b = np.array([2, 2, 0, 0, 1, 1, 1])
    assert v.adjusted_rand_index(a, b) == 1.0
    assert v.match_labels(a, b)[1] == 1.0


def test_per_cluster_consistency():
    ref = np.array([0, 0, 0, 0, 1, 1])
    other = np.array([5, 5, 5, 7, 7, 7])
    mapping, _ = v.match_labels(ref, other)
    assert v.per_cluster_consistency(ref, other, mapping) == {0: 0.75, 1: 1.0}


def test_sweep_single_value():
    pts, _ = two_blobs(n_per=40, gap=10.0, seed=0)
    result = v.sweep_parameter(pts, [10])
    assert len(result.rows) == 1 and result.selected == 10 and result.error is None
    assert result.rows[0].n_clusters == 2


def test_sweep_all_single_cluster_reports_error(tmp_path):
    pts = np.random.default_rng(0).normal(size=(60, 2))
    result = v.sweep_parameter(pts, [50, 55])
    assert result.selected is None and result.error
    assert all(math.isnan(r.silhouette) for r in result.rows)
    result.to_csv(tmp_path / "sweep.csv")
    assert (tmp_path / "sweep.csv").read_text().count("\n") == 3


def test_sweep_selects_by_silhouette(rng):
    pts = np.vstack([rng.normal(c, 0.5, (30, 2)) for c in ((0, 0), (10, 0), (0, 10), (10, 10))])
    result = v.sweep_parameter(pts, [5, 10, 20])
    best = max((r for r in result.rows if not math.isnan(r.silhouette)),
               key=lambda r: (r.silhouette, -r.davies_bouldin))
    assert result.selected == best.min_samples_value
    assert best.n_clusters == 4
