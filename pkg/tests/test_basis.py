import warnings

import numpy as np
import pytest

from birdgp.basis import (
    BasisNetConfig,
    BasisSet,
    VoxelGrid,
    fit_basis_network,
    fixed_kernel_basis,
    kernel_matrix,
    learn_basis,
    orthonormalize,
    pca_basis,
    variance_explained,
)
from birdgp.mlp import forward
from birdgp.errors import InvalidConfig, RankDeficient, ResourceLimit, TruncatedRank
from birdgp.numerics import make_rng, svd_thin


def planted(n=100, seed=0):
    grid = VoxelGrid.regular(20, 20)
    c = grid.normalized
    phi = np.stack(
        [
            np.sin(np.pi * c[:, 0]),
            np.cos(np.pi * c[:, 1]),
            c[:, 0] * c[:, 1],
            np.exp(-4 * (c**2).sum(1)),
            np.sin(2 * c[:, 0] + c[:, 1]),
        ],
        axis=1,
    )
    A = make_rng(seed).normal(size=(n, phi.shape[1]))
    return grid, A @ phi.T


def orthonormality_gap(psi):
    return np.abs(psi.T @ psi - np.eye(psi.shape[1])).max()


@pytest.fixture(scope="module")
def planted_fit():
    grid, X = planted()
    cfg = BasisNetConfig(epochs=100, lr=3e-3, batch_voxels=64)
    basis, fit = learn_basis(X, grid, 5, cfg, make_rng(1))
    return grid, X, basis, fit


def test_grid_normalization():
    g = VoxelGrid.regular(3, 5)
    assert g.size == 15 and g.dim == 2
    assert g.normalized.min() == -1.0 and g.normalized.max() == 1.0
    # row-major: last axis varies fastest
    np.testing.assert_array_equal(g.coords[:3], [[0, 0], [0, 1], [0, 2]])


def test_zero_images_fit_to_zero():
    grid = VoxelGrid.regular(6, 6)
    cfg = BasisNetConfig(epochs=5, hidden=(16,), p_update="lstsq")
    fit = fit_basis_network(np.zeros((4, 36)), grid, 2, cfg, make_rng(0))
    np.testing.assert_allclose(fit.P, 0.0, atol=1e-12)
    assert fit.loss_trace[-1] == 0.0
    # joint steps only approach the zero fit
    fit = fit_basis_network(np.zeros((4, 36)), grid, 2, BasisNetConfig(epochs=200, hidden=(16,), lr=1e-2), make_rng(0))
    assert fit.loss_trace[-1] < 1e-3 * fit.loss_trace[0]


def test_planted_low_rank_recovered(planted_fit):
    grid, X, basis, fit = planted_fit
    R = X - fit.P @ fit.raw_basis(grid).T
    assert (R**2).mean() < 0.05 * X.var()
    assert fit.loss_trace[-1] <= fit.loss_trace[0]


def test_planted_loss_decreases_first_epochs():
    grid, X = planted()
    fit = fit_basis_network(X, grid, 5, BasisNetConfig(epochs=6, lr=3e-3, batch_voxels=64), make_rng(1))
    assert np.all(np.diff(fit.loss_trace[:6]) < 0)


def test_k_too_large():
    grid, X = planted(n=3)
    with pytest.raises(InvalidConfig):
        fit_basis_network(X, grid, 4, BasisNetConfig(epochs=1), make_rng(0))


def test_default_architecture():
    cfg = BasisNetConfig()
    assert cfg.hidden == (128, 128, 128, 128) and cfg.activation == "relu"


def test_learned_basis_orthonormal_and_span(planted_fit):
    grid, X, basis, fit = planted_fit
    assert orthonormality_gap(basis.psi) < 1e-8
    raw = fit.raw_basis(grid)
    # least-squares fit of every image on psi equals the fit on the raw outputs
    fit_psi = basis.psi @ (basis.psi.T @ X.T)
    fit_raw = raw @ np.linalg.lstsq(raw, X.T, rcond=None)[0]
    assert np.abs(fit_psi - fit_raw).max() < 1e-8


def test_off_grid_evaluation_reproduces_psi(planted_fit):
    grid, X, basis, fit = planted_fit
    raw = forward(basis.network, grid.normalize(grid.coords))
    again = orthonormalize(raw, "svd", grid).psi
    for k in range(basis.K):
        assert abs(np.corrcoef(again[:, k], basis.psi[:, k])[0, 1]) > 0.999
    np.testing.assert_allclose(basis.evaluate(grid.coords), basis.psi, atol=1e-8)


def test_orthonormalize_identity_up_to_sign():
    Q, _ = np.linalg.qr(make_rng(3).normal(size=(30, 4)))
    for strategy in ("svd", "gram_schmidt"):
        psi = orthonormalize(Q, strategy).psi
        overlap = np.abs(Q.T @ psi)
        # same columns, possibly permuted by singular-value ordering ties, up to sign
        np.testing.assert_allclose(np.sort(overlap.max(axis=0)), 1.0, atol=1e-10)


def test_orthonormalize_rank_deficient():
    raw = make_rng(4).normal(size=(20, 3))
    raw = np.column_stack([raw, raw[:, 0] + raw[:, 1]])
    with pytest.raises(RankDeficient):
        orthonormalize(raw, "gram_schmidt")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        basis = orthonormalize(raw, "svd")
    assert basis.K == 3
    assert any(isinstance(w.message, TruncatedRank) and w.message.rank == 3 for w in caught)


def test_pca_exact_rank():
    rng = make_rng(5)
    patterns = rng.normal(size=(3, 40))
    X = rng.normal(size=(12, 3)) @ patterns
    basis = pca_basis(X, 3)
    assert orthonormality_gap(basis.psi) < 1e-8
    recon = basis.reconstruct(basis.project(X))
    assert np.abs(recon - X).max() < 1e-8


def test_pca_single_image():
    img = make_rng(6).normal(size=(1, 25))
    basis = pca_basis(img, 1)
    np.testing.assert_allclose(np.abs(basis.psi[:, 0]), np.abs(img[0]) / np.linalg.norm(img), atol=1e-12)


def test_pca_beats_learned_basis_on_training_variance(planted_fit):
    grid, X, basis, _ = planted_fit
    pca = pca_basis(X, basis.K, grid)
    Xc = X - pca.centering
    # compare captured centred variance for both bases (Eckart-Young)
    captured_pca = np.sum((Xc @ pca.psi) ** 2)
    captured_dnn = np.sum((Xc @ basis.psi) ** 2)
    assert captured_pca >= captured_dnn - 1e-9


def test_se_long_length_scale_constant_leading_eigenvector():
    grid = VoxelGrid.regular(8, 8)
    basis = fixed_kernel_basis(grid, "se", 1e4, 1)
    v = basis.psi[:, 0]
    np.testing.assert_allclose(np.abs(v), 1 / 8, atol=1e-6)


@pytest.mark.parametrize("kernel", ["se", "matern"])
def test_gram_psd(kernel):
    c = VoxelGrid.regular(12, 12).normalized
    G = kernel_matrix(c, c, kernel, 0.3)
    np.testing.assert_allclose(G, G.T)
    ev = np.linalg.eigvalsh(G)
    assert ev.min() >= -1e-10 * ev.max()


def test_se_eigenvalues_match_jacobi_oracle():
    grid = VoxelGrid(np.linspace(0.0, 1.0, 64))
    basis = fixed_kernel_basis(grid, "se", 0.2, 10)
    got = np.array([float(v) for v in basis.meta["gram_eigenvalues"].split(",")])
    G = kernel_matrix(grid.normalized, grid.normalized, "se", 0.2)
    # independent oracle: one-sided Jacobi singular values of the PSD Gram matrix
    oracle = svd_thin(G)[1][:10]
    np.testing.assert_allclose(got, oracle, rtol=1e-5)
    exact = np.array(
        [v for v in np.sort(np.linalg.eigvalsh(G))[::-1][:10]]
    )
    G_psi = basis.psi.T @ G @ basis.psi
    np.testing.assert_allclose(np.diag(G_psi), exact, rtol=1e-8)


def test_fixed_kernel_resource_guard(monkeypatch):
    import birdgp.basis as mod

    monkeypatch.setattr(mod, "MAX_DENSE_VOXELS", 50)
    grid = VoxelGrid.regular(10, 10)
    with pytest.raises(ResourceLimit):
        fixed_kernel_basis(grid, "matern", 0.5, 4)
    basis = fixed_kernel_basis(grid, "matern", 0.5, 4, subsample=60, rng=make_rng(0))
    assert orthonormality_gap(basis.psi) < 1e-8


def test_variance_explained_properties(planted_fit):
    grid, X, basis, _ = planted_fit
    values = [variance_explained(X, basis, k) for k in range(1, basis.K + 1)]
    assert np.all(np.diff(values) >= -1e-15)
    rank_basis = pca_basis(X, 5)
    assert variance_explained(X, rank_basis, 5) == pytest.approx(1.0, abs=1e-10)


def test_eigenvalue_ordering_and_persistence(tmp_path, planted_fit):
    grid, X, basis, _ = planted_fit
    lam = np.array([0.5, 3.0, 1.0, 0.1, 2.0])
    ordered = basis.with_eigenvalues(lam)
    np.testing.assert_array_equal(ordered.eigenvalues, [3.0, 2.0, 1.0, 0.5, 0.1])
    np.testing.assert_array_equal(ordered.psi[:, 0], basis.psi[:, 1])
    np.testing.assert_allclose(ordered.evaluate(grid.coords), ordered.psi, atol=1e-8)
    ordered.save(tmp_path / "b")
    back = BasisSet.load(tmp_path / "b")
    np.testing.assert_array_equal(back.psi, ordered.psi)
    np.testing.assert_array_equal(back.eigenvalues, ordered.eigenvalues)
    assert back.method == "dnn" and back.grid.shape == (20, 20)
    np.testing.assert_allclose(back.evaluate(grid.coords[:7]), ordered.psi[:7], atol=1e-8)
