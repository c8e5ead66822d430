import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dtw_full, dtw_full_banded
from trajrisk.cohort import FEATURES, VitalTrajectory
from trajrisk.dtw import (DistanceMatrix, dtw_distance, feature_distance_matrix, index_path,
                          pairwise_dtw, total_distance_matrix)

values = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
sequences = st.lists(values, min_size=1, max_size=12)


@pytest.mark.parametrize("a, b, expected", [
    ([1, 2, 3], [1, 2, 3], 0.0),
    ([1, 3], [2, 2, 2], 3.0),
    ([0, 0], [1, 1], 2.0),
])
def test_hand_examples(a, b, expected):
    assert dtw_distance(a, b) == expected


def test_matches_full_table_oracle(rng):
    for _ in range(40):
        a = rng.normal(size=rng.integers(1, 30))
        b = rng.normal(size=rng.integers(1, 30))
        assert dtw_distance(a, b) == pytest.approx(dtw_full(a, b), abs=1e-12)


def test_band_matches_banded_oracle(rng):
    for _ in range(30):
        a = rng.normal(size=rng.integers(5, 25))
        b = rng.normal(size=rng.integers(5, 25))
        band = abs(len(a) - len(b)) + int(rng.integers(0, 4))
        assert dtw_distance(a, b, band) == pytest.approx(dtw_full_banded(a, b, band), abs=1e-12)


def test_wide_band_equals_unbanded_exactly(rng):
    a, b = rng.normal(size=17), rng.normal(size=11)
    assert dtw_distance(a, b, band=16) == dtw_distance(a, b)


@pytest.mark.parametrize("a, b, band", [([], [1.0], None), ([1.0], [], None), ([1, 2, 3, 4], [1.0], 2)])
def test_invalid_inputs(a, b, band):
    with pytest.raises(ValueError):
        dtw_distance(a, b, band)


@settings(max_examples=60, deadline=None)
@given(sequences, sequences)
def test_symmetric_and_non_negative(a, b):
    d = dtw_distance(a, b)
    assert d >= 0
    assert d == dtw_distance(b, a)


@settings(max_examples=60, deadline=None)
@given(sequences)
def test_self_distance_zero(a):
    assert dtw_distance(a, a) == 0.0


@settings(max_examples=40, deadline=None)
@given(values, st.integers(1, 20))
def test_repeated_point_costs_nothing(v, reps):
    assert dtw_distance([v], [v] * reps) == 0.0


def _trajectories(series_by_patient):
    out = {}
    for pid, s in series_by_patient.items():
        vals = np.tile(np.asarray(s, dtype=float)[:, None], (1, len(FEATURES)))
        out[pid] = VitalTrajectory(pid, np.arange(len(s)), vals)
    return out


def test_feature_matrix_single_patient():
    m = feature_distance_matrix(_trajectories({"p": [1.0, 2.0]}), "heart_rate")
    assert m.values.shape == (1, 1) and m.values[0, 0] == 0.0


def test_feature_matrix_three_patients_hand_values():
    m = feature_distance_matrix(_trajectories({"a": [1, 3], "b": [2, 2, 2], "c": [0, 0]}), FEATURES[1])
    expected = np.array([[0, 3, 4], [3, 0, 6], [4, 6, 0]], dtype=float)
    np.testing.assert_array_equal(m.values, expected)
    assert m.patient_index == ("a", "b", "c") and m.feature_tag == FEATURES[1]


def test_pairwise_equals_brute_force(rng):
    series = [rng.normal(size=rng.integers(1, 20)) for _ in range(12)]
    got = pairwise_dtw(series)
    for i in range(12):
        for j in range(12):
            assert got[i, j] == dtw_distance(series[i], series[j])


def test_parallel_bit_identical_to_serial(rng):
    series = [rng.normal(size=rng.integers(5, 40)) for _ in range(40)]
    serial = pairwise_dtw(series, parallel=False)
    parallel = pairwise_dtw(series, parallel=True, chunk=7)
    assert serial.tobytes() == parallel.tobytes()


def test_pairwise_band_too_narrow():
    with pytest.raises(ValueError):
        pairwise_dtw([np.ones(3), np.ones(10)], band=2)


def test_missing_trajectory_rejected():
    traj = _trajectories({"a": [1.0], "b": [2.0]})
    traj["b"] = VitalTrajectory("b", np.zeros(0, dtype=int), np.zeros((0, len(FEATURES))))
    with pytest.raises(ValueError, match="b"):
        feature_distance_matrix(traj, "heart_rate")


def test_total_is_elementwise_sum(rng):
    ids = tuple("abcde")
    mats = []
    for f in FEATURES:
        v = rng.random((5, 5))
        v = v + v.T
        np.fill_diagonal(v, 0)
        mats.append(DistanceMatrix(v, f, ids))
    total = total_distance_matrix(mats)
    assert total.feature_tag == "total"
    for i in range(5):
        for j in range(5):
            assert total.values[i, j] == pytest.approx(sum(m.values[i, j] for m in mats), abs=1e-12)


def test_total_linearity_and_zero():
    ids = ("a", "b")
    M = np.array([[0.0, 1.5], [1.5, 0.0]])
    total = total_distance_matrix([DistanceMatrix(M.copy(), "x", ids), DistanceMatrix(2 * M, "y", ids)])
    np.testing.assert_array_equal(total.values, 3 * M)
    zeros = [DistanceMatrix(np.zeros((2, 2)), f, ids) for f in FEATURES]
    assert not total_distance_matrix(zeros).values.any()


def test_total_rejects_mismatch():
    a = DistanceMatrix(np.zeros((2, 2)), "x", ("a", "b"))
    with pytest.raises(ValueError):
        total_distance_matrix([a, DistanceMatrix(np.zeros((2, 2)), "y", ("b", "a"))])
    with pytest.raises(ValueError):
        total_distance_matrix([a, DistanceMatrix(np.zeros((3, 3)), "y", ("a", "b", "c"))])


def test_binary_round_trip(tmp_path, rng):
    series = [rng.normal(size=8) for _ in range(6)]
    m = DistanceMatrix(pairwise_dtw(series), "heart_rate", tuple(f"p{i}" for i in range(6)))
    path = tmp_path / "hr.tcdm"
    m.save(path)
    assert index_path(path).exists()
    back = DistanceMatrix.load(path)
    assert back.values.tobytes() == m.values.tobytes()
    assert back.patient_index == m.patient_index and back.feature_tag == "heart_rate"


def test_load_rejects_corrupt(tmp_path):
    path = tmp_path / "bad.tcdm"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        DistanceMatrix.load(path)
    m = DistanceMatrix(np.zeros((3, 3)), "x", ("a", "b", "c"))
    m.save(path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        DistanceMatrix.load(path)


def test_matrix_is_read_only():
    m = DistanceMatrix(np.zeros((2, 2)), "x", ("a", "b"))
    with pytest.raises(ValueError):
        m.values[0, 1] = 1.0
