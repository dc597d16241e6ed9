import time

import numpy as np
import pytest

from birdgp.basis import BasisNetConfig, VoxelGrid, fixed_kernel_basis
from birdgp.errors import InvalidInput, ShapeError
from birdgp.numerics import make_rng
from birdgp.pipeline import (
    STAGES,
    FittedModel,
    PipelineConfig,
    StageError,
    fit_model,
    predict_intervals,
    predict_mean,
)
from birdgp.projection import simulate_images
from birdgp.svgd import ParticleEnsemble, SvgdConfig, linear_ensemble

GRID = VoxelGrid.regular(10, 10)


def oracle_basis(K, kernel="se", ls=0.3):
    return fixed_kernel_basis(GRID, kernel, ls, K).with_eigenvalues(2.0 / np.arange(1, K + 1))


def linear_model(B, lam, x_basis, y_basis, x_sigma2=0.0, y_sigma2=0.0, copies=1):
    ens = linear_ensemble(B, lam)
    if copies > 1:
        ens = ParticleEnsemble(ens.layout, np.repeat(ens.particles, copies, axis=0), ens.config)
    return FittedModel([x_basis], np.array([x_sigma2]), y_basis, y_sigma2, ens)


def smoke_config(**kw):
    base = dict(
        k_x=5, k_y=5,
        basis_net=BasisNetConfig(hidden=(16, 16), epochs=3, batch_voxels=50),
        gibbs_iters=60, gibbs_burn_in=20, bnn_hidden=(8,),
        svgd=SvgdConfig(n_particles=4, epochs=2, batch_size=8),
        seed=3,
    )
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def smoke_data():
    rng = make_rng(0)
    X = simulate_images(oracle_basis(6), 20, 0.01, rng)
    Y = simulate_images(oracle_basis(6, "matern"), 20, 0.01, rng)
    Z = rng.normal(size=(20, 2))
    return X, Y, Z


def test_identity_round_trip():
    b = oracle_basis(8)
    model = linear_model(np.eye(8), 1e-9, b, b)
    X = make_rng(1).normal(size=(3, GRID.size))
    np.testing.assert_allclose(predict_mean(model, X), X @ b.psi @ b.psi.T, atol=1e-12)


def test_zero_weights_give_zero_image():
    model = linear_model(np.zeros((6, 8)), 1.0, oracle_basis(8), oracle_basis(6, "matern"))
    pred = predict_mean(model, make_rng(2).normal(size=(4, GRID.size)))
    assert pred.shape == (4, GRID.size) and not pred.any()


def test_prediction_deterministic_and_shape_checked():
    model = linear_model(make_rng(3).normal(size=(6, 8)), 1.0, oracle_basis(8), oracle_basis(6, "matern"))
    X = make_rng(4).normal(size=(2, GRID.size))
    assert predict_mean(model, X).tobytes() == predict_mean(model, X).tobytes()
    with pytest.raises(ShapeError):
        predict_mean(model, [X, X])


def test_intervals_nest_and_widen():
    b = oracle_basis(6)
    model = linear_model(make_rng(5).normal(size=(6, 6)), 0.5, b, b, y_sigma2=0.1, copies=5)
    X = make_rng(6).normal(size=(3, GRID.size))
    iv = predict_intervals(model, X, levels=(0.5, 0.9, 0.95, 0.99), rng=make_rng(7))
    levels = sorted(iv)
    for a, c in zip(levels, levels[1:]):
        assert np.all(iv[c][0] <= iv[a][0]) and np.all(iv[a][1] <= iv[c][1])
    with pytest.raises(InvalidInput):
        predict_intervals(model, X, levels=(1.0,))


def test_degenerate_ensemble_zero_width():
    b = oracle_basis(6)
    with np.errstate(divide="ignore"):
        model = linear_model(np.eye(6), 0.0, b, b, copies=3)
    X = make_rng(8).normal(size=(2, GRID.size))
    lo, hi = predict_intervals(model, X, rng=make_rng(9))[0.95]
    point = predict_mean(model, X)
    np.testing.assert_allclose(lo, point, atol=1e-12)
    np.testing.assert_allclose(hi, point, atol=1e-12)


def test_coverage_on_data_from_the_model():
    bx, by = oracle_basis(6), oracle_basis(5, "matern")
    rng = make_rng(10)
    B = rng.normal(size=(5, 6))
    lam, s2 = 0.3, 0.05
    n = 60
    x = rng.normal(size=(n, 6))
    y = x @ B.T + np.sqrt(lam) * rng.normal(size=(n, 5))
    X = x @ bx.psi.T
    Y = y @ by.psi.T + np.sqrt(s2) * rng.normal(size=(n, GRID.size))
    model = linear_model(B, lam, bx, by, y_sigma2=s2, copies=20)
    lo, hi = predict_intervals(model, X, rng=make_rng(11))[0.95]
    rate = np.mean((Y >= lo) & (Y <= hi))
    assert 0.93 <= rate <= 0.98


def test_smoke_fit_stages_and_persistence(smoke_data, tmp_path):
    X, Y, Z = smoke_data
    t0 = time.perf_counter()
    model = fit_model(X, GRID, Y, GRID, smoke_config(), covariates=Z)
    assert time.perf_counter() - t0 < 60
    assert tuple(model.timings) == STAGES
    assert model.ensemble.arch.layer_sizes == (7, 8, 5)
    assert model.block_widths == {"channel0": 5, "covariate": 2}
    pred = predict_mean(model, X, Z)
    assert pred.shape == Y.shape and np.isfinite(pred).all()
    model.save(tmp_path / "m")
    back = FittedModel.load(tmp_path / "m")
    np.testing.assert_array_equal(predict_mean(back, X, Z), pred)
    assert set(back.timings) == set(STAGES)
    assert (tmp_path / "m" / "svgd_trace.csv").exists()
    with pytest.raises(InvalidInput):
        model.inputs(X)


def test_fit_is_replayable(smoke_data):
    X, Y, _ = smoke_data
    a = fit_model(X, GRID, Y, GRID, smoke_config())
    b = fit_model(X, GRID, Y, GRID, smoke_config())
    assert a.ensemble.particles.tobytes() == b.ensemble.particles.tobytes()
    assert a.y_basis.psi.tobytes() == b.y_basis.psi.tobytes()
    c = fit_model(X, GRID, Y, GRID, smoke_config(seed=4))
    assert a.ensemble.particles.tobytes() != c.ensemble.particles.tobytes()


def test_fixed_bases_and_multichannel(smoke_data):
    X, Y, _ = smoke_data
    cfg = smoke_config(basis_method="se", k_x=(4, 3), k_y=5)
    model = fit_model([X, X[:, ::-1].copy()], [GRID, GRID], Y, GRID, cfg)
    assert [b.K for b in model.x_bases] == [4, 3]
    assert model.ensemble.arch.layer_sizes[0] == 7
    assert predict_mean(model, [X, X]).shape == Y.shape


def test_stage_errors_are_tagged(smoke_data):
    X, Y, _ = smoke_data
    with pytest.raises(StageError) as e:
        fit_model(X, GRID, Y, GRID, smoke_config(k_x=500))
    assert e.value.stage == "kernel_learning_predictors"
