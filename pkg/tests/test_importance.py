import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdgp.errors import ShapeError
from birdgp.importance import block_labels, importance_fn, importance_measure, linear_oracle_im
from birdgp.mlp import MlpArch, forward
from birdgp.numerics import make_rng
from birdgp.svgd import ParticleEnsemble, SvgdConfig, init_ensemble, linear_ensemble


def averaged_log_density(ens, x, y):
    """Particle average of the Gaussian log density, dropping constants."""
    total = 0.0
    for s in range(ens.n_particles):
        f = forward(ens.params(s), x[None])[0]
        lam = ens.lambdas[s]
        total += np.sum(-0.5 * (y - f) ** 2 / lam)
    return total / ens.n_particles


def test_constant_network_zero_importance():
    ens = init_ensemble(MlpArch((4, 6, 2), "tanh"), 2, SvgdConfig(n_particles=3), make_rng(0))
    layout = ens.layout
    ens.particles[:, : 6 * 4] = 0.0  # first-layer weights
    X = make_rng(1).normal(size=(10, 4))
    Y = make_rng(2).normal(size=(10, 2))
    np.testing.assert_array_equal(importance_fn(ens, X, Y), 0.0)
    assert importance_measure(ens, X, Y).im.max() == 0.0
    assert layout.n_net > 24


def test_scalar_linear_hand_algebra():
    beta, lam = 1.7, 0.4
    ens = linear_ensemble([[beta]], lam)
    x, y = np.array([0.3]), np.array([-1.1])
    q = importance_fn(ens, x, y)
    assert q[0] == pytest.approx(beta * (y[0] - beta * x[0]) / lam, rel=1e-14)


def test_importance_matches_fd():
    ens = init_ensemble(MlpArch((3, 7, 2), "tanh"), 2, SvgdConfig(n_particles=4), make_rng(3),
                        lambda_init=[0.5, 1.5])
    x = make_rng(4).normal(size=3)
    y = make_rng(5).normal(size=2)
    q = importance_fn(ens, x, y)
    h = 1e-6
    num = np.array([
        (averaged_log_density(ens, x + h * e, y) - averaged_log_density(ens, x - h * e, y)) / (2 * h)
        for e in np.eye(3)
    ])
    assert np.max(np.abs(q - num) / np.maximum(np.abs(num), 1e-8)) < 1e-4


@pytest.mark.parametrize("lam", [1.0, 0.25])
def test_scalar_linear_measure_converges(lam):
    beta = -1.3
    rng = make_rng(6)
    n = 100_000
    x = rng.normal(size=(n, 1))
    y = beta * x + np.sqrt(lam) * rng.normal(size=(n, 1))
    im = importance_measure(linear_ensemble([[beta]], lam), x, y).im[0]
    exact = linear_oracle_im([[beta]], lam)[0]
    assert exact == pytest.approx(np.sqrt(2 / np.pi) * abs(beta) / np.sqrt(lam))
    assert abs(im / exact - 1) < 0.02


def test_independent_outcome_zero_measure():
    ens = linear_ensemble(np.zeros((2, 3)), 1.0)
    X = make_rng(7).normal(size=(50, 3))
    Y = make_rng(8).normal(size=(50, 2))
    np.testing.assert_array_equal(importance_measure(ens, X, Y).im, 0.0)


def test_oracle_special_cases():
    np.testing.assert_array_equal(linear_oracle_im(np.zeros((3, 4)), np.ones(3)), 0.0)
    d = np.array([0.5, -2.0, 3.0])
    np.testing.assert_allclose(linear_oracle_im(np.diag(d), 1.0), np.sqrt(2 / np.pi) * np.abs(d))


def test_oracle_against_monte_carlo():
    rng = make_rng(9)
    B = rng.normal(size=(4, 3))
    lam = np.array([0.5, 1.0, 2.0, 0.3])
    n = 200_000
    X = rng.normal(size=(n, 3))
    Y = X @ B.T + np.sqrt(lam) * rng.normal(size=(n, 4))
    im = importance_measure(linear_ensemble(B, lam), X, Y, chunk=50_000).im
    np.testing.assert_allclose(im, linear_oracle_im(B, lam), rtol=0.01)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_measure_invariant_to_pair_order(seed):
    rng = make_rng(seed)
    ens = init_ensemble(MlpArch((3, 5, 2)), 2, SvgdConfig(n_particles=2), rng)
    X = rng.normal(size=(12, 3))
    Y = rng.normal(size=(12, 2))
    perm = rng.permutation(12)
    a = importance_measure(ens, X, Y).im
    b = importance_measure(ens, X[perm], Y[perm]).im
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert np.all(a >= 0)


def test_monte_carlo_error_halves_with_quadrupled_pairs():
    beta, lam, reps = 0.8, 1.0, 300
    sizes = np.array([100, 200, 400, 800, 1600])
    ens = linear_ensemble([[beta]], lam)
    rng = make_rng(10)
    sds = []
    for n in sizes:
        est = []
        for _ in range(reps):
            x = rng.normal(size=(n, 1))
            y = beta * x + rng.normal(size=(n, 1))
            est.append(importance_measure(ens, x, y).im[0])
        sds.append(np.std(est))
    slope = np.polyfit(np.log(sizes), np.log(sds), 1)[0]
    assert abs(slope + 0.5) < 0.1


def test_report_ranks_and_csv(tmp_path):
    ens = linear_ensemble(np.diag([1.0, 3.0, 2.0]), 1.0)
    X = make_rng(11).normal(size=(500, 3))
    Y = X @ np.diag([1.0, 3.0, 2.0]) + make_rng(12).normal(size=(500, 3))
    rep = importance_measure(ens, X, Y, blocks=block_labels({"image": 2, "covariate": 1}))
    np.testing.assert_array_equal(rep.rank, [3, 1, 2])
    rep.to_csv(tmp_path / "im.csv")
    lines = (tmp_path / "im.csv").read_text().splitlines()
    assert lines[0] == "dimension,importance,rank,block"
    assert lines[3].endswith(",2,covariate")
    assert rep.n_eval == 500 and rep.n_particles == 1


def test_shape_checks():
    ens = linear_ensemble(np.ones((2, 3)), 1.0)
    with pytest.raises(ShapeError):
        importance_fn(ens, np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        importance_measure(ens, np.zeros((2, 3)), np.zeros((2, 2)), blocks=["x"])


def test_multi_particle_average_is_linear_in_particles():
    a = linear_ensemble([[1.0, 0.0]], 1.0)
    b = linear_ensemble([[0.0, 2.0]], 0.5)
    both = ParticleEnsemble(a.layout, np.vstack([a.particles, b.particles]))
    x, y = np.array([0.2, -0.4]), np.array([0.7])
    np.testing.assert_allclose(importance_fn(both, x, y), 0.5 * (importance_fn(a, x, y) + importance_fn(b, x, y)))
