import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdgp.errors import DegenerateInput, ShapeError
from birdgp.metrics import (
    accuracy_and_proportion,
    activated_region,
    correlation_matrix,
    coverage_rate,
    mse,
    read_pgm,
    subject_order,
    write_pgm,
)
from birdgp.numerics import make_rng, pearson


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 2000), st.integers(0, 2**31))
def test_self_region_size(V, seed):
    img = make_rng(seed).normal(size=V)
    assert activated_region(img, img).sum() == math.ceil(0.05 * V)


def test_disjoint_top_sets_empty():
    obs = np.zeros(40)
    pred = np.zeros(40)
    obs[:3] = [5, 6, 7]
    pred[-3:] = [5, 6, 7]
    obs[10] = pred[20] = 0.1  # break constancy elsewhere too
    assert not activated_region(obs, pred).any()


def test_single_dominant_voxel():
    obs = np.linspace(0.1, 0.5, 20)
    pred = np.linspace(0.5, 0.1, 20)
    obs[7] = pred[7] = 10.0
    mask = activated_region(obs, pred)
    np.testing.assert_array_equal(np.flatnonzero(mask), [7])


def test_constant_image_rejected():
    with pytest.raises(DegenerateInput):
        activated_region(np.ones(10), np.arange(10.0))


def test_identical_predictions_unit_diagonal():
    X = make_rng(0).normal(size=(6, 300))
    for mode in ("row", "column", "union", "global"):
        np.testing.assert_allclose(np.diag(correlation_matrix(X, X, mode).C), 1.0)


def test_orthogonal_pair_zero_off_diagonal():
    a = np.array([1.0, -1.0, 1.0, -1.0])
    b = np.array([1.0, 1.0, -1.0, -1.0])
    C = correlation_matrix(np.stack([a, b]), np.stack([a, b]), "global").C
    np.testing.assert_allclose(C, np.eye(2), atol=1e-15)


def test_three_subjects_match_hand_loop():
    rng = make_rng(1)
    P = rng.normal(size=(3, 400))
    O = P + 0.3 * rng.normal(size=(3, 400))
    got = correlation_matrix(P, O, "row").C
    expected = np.empty((3, 3))
    for i in range(3):
        m = activated_region(O[i], P[i])
        for j in range(3):
            expected[i, j] = pearson(P[i, m], O[j, m])
    np.testing.assert_allclose(got, expected, atol=1e-12)
    col = correlation_matrix(P, O, "column").C
    for i in range(3):
        for j in range(3):
            m = activated_region(O[j], P[j])
            assert col[i, j] == pytest.approx(pearson(P[i, m], O[j, m]), abs=1e-12)


def test_global_mask_symmetric_when_exact():
    X = make_rng(2).normal(size=(5, 50))
    C = correlation_matrix(X, X, "global").C
    np.testing.assert_allclose(C, C.T, atol=1e-14)


def test_degenerate_row_flagged():
    P = make_rng(3).normal(size=(4, 80))
    O = P.copy()
    P[2] = 0.0
    cm = correlation_matrix(P, O, "row")
    assert np.isnan(cm.C[2]).all() and cm.n_degenerate == 4
    curve = accuracy_and_proportion(cm)
    assert np.isnan(curve.a[2])
    assert np.all(curve.a[[0, 1, 3]] == 1.0)


def test_diagonal_dominant_accuracy():
    C = np.full((5, 5), 0.1) + 0.8 * np.eye(5)
    curve = accuracy_and_proportion(C, np.array([0.0, 0.5, 0.99, 1.0]))
    np.testing.assert_array_equal(curve.a, 1.0)
    np.testing.assert_array_equal(curve.p, [1.0, 1.0, 1.0, 0.0])


def test_exchangeable_random_matrix():
    C = make_rng(4).uniform(-1, 1, size=(200, 200))
    curve = accuracy_and_proportion(C, np.array([0.5]))
    assert abs(curve.p[0] - 0.5) <= 3 * np.sqrt(0.25 / 200)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 30))
def test_proportion_curve_monotone(seed, n):
    C = make_rng(seed).uniform(-1, 1, size=(n, n))
    curve = accuracy_and_proportion(C)
    assert np.all(np.diff(curve.p) <= 0)
    assert np.all((curve.p >= 0) & (curve.p <= 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 20))
def test_accuracy_rowwise_monotone_invariance(seed, n):
    rng = make_rng(seed)
    C = rng.uniform(-1, 1, size=(n, n))
    transforms = [np.exp, np.arctan, lambda v: v**3, lambda v: 2 * v - 7]
    T = np.stack([transforms[i % 4](C[i]) for i in range(n)])
    np.testing.assert_array_equal(accuracy_and_proportion(C).a, accuracy_and_proportion(T).a)


def test_accuracy_needs_two_subjects():
    with pytest.raises(ShapeError):
        accuracy_and_proportion(np.ones((1, 1)))


def test_mse_cases():
    X = make_rng(5).normal(size=(4, 9))
    assert mse(X, X)[0] == 0.0
    V = 16
    obs = np.zeros((3, V))
    obs[np.arange(3), [0, 5, 9]] = 1.0
    assert mse(np.zeros_like(obs), obs)[0] == pytest.approx(1 / V)
    overall, per = mse(np.zeros((4, 2)), np.array([[1.0, 1.0], [0, 0], [2.0, 2.0], [0, 0]]), labels=[7, 3, 7, 3])
    assert per == {3: 0.0, 7: 2.5} and overall == pytest.approx(1.25)


def test_coverage_rate():
    obs = np.array([[0.0, 1.0, 2.0, 3.0]])
    rate, per = coverage_rate(np.full((1, 4), 0.5), np.full((1, 4), 2.0), obs)
    assert rate == 0.5 and per.tolist() == [0.5]


def test_subject_order_filters_and_sorts():
    C = np.array([[1.0, 0.5, 0.9], [0.8, 0.2, 0.1], [0.3, 0.4, 0.5]])
    curve = accuracy_and_proportion(C)
    np.testing.assert_array_equal(subject_order(curve), [0, 2, 1])
    np.testing.assert_array_equal(subject_order(curve, [600, 100, 700], min_region=500), [0, 2])


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img, 0.0, 1.0)
    pix = read_pgm(tmp_path / "a.pgm")
    assert pix.shape == (3, 4) and pix[0, 0] == 0 and pix[-1, -1] == 255
    assert "lo = 0.0" in (tmp_path / "a.pgm.txt").read_text()


def test_correlation_csv(tmp_path):
    X = make_rng(6).normal(size=(3, 40))
    cm = correlation_matrix(X, X)
    cm.to_csv(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "subject,0,1,2" and len(rows) == 4
