"""Stage-1 projection of images onto an orthonormal basis by Gibbs sampling.

Model, per image ``i`` with basis ``Psi`` (V x K, orthonormal columns)::

    X_i = Psi x_i + eps_i,   eps_i ~ N(0, sigma2_i I)
    x_i ~ N(0, Lambda),      Lambda = diag(lambda_1..lambda_K)
    sigma2_i ~ IG(a_sigma, b_sigma),  lambda_k ~ IG(a_lambda, b_lambda)

Because ``Psi^T Psi = I`` every full conditional is available in closed form
with a diagonal precision:

* ``x_i | .``      N(m_i, diag(1/p_i)),  p_i = 1/lambda + 1/sigma2_i,
                   m_i = (Psi^T X_i / sigma2_i) / p_i
* ``sigma2_i | .`` IG(a_sigma + V/2, b_sigma + ||X_i - Psi x_i||^2 / 2)
* ``lambda_k | .`` IG(a_lambda + n/2, b_lambda + sum_i x_ik^2 / 2)

One sweep updates all ``x_i``, then all ``sigma2_i``, then ``lambda``.
The squared residual splits into the out-of-span part (fixed) and
``||Psi^T X_i - x_i||^2``, so a sweep costs O(nK) after one projection.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSet
from .errors import DegenerateNoise, InvalidConfig, InvalidInput, InvalidState, ShapeError
from .numerics import read_tensor, write_tensor

SIGMA2_FLOOR = 1e-12
LAMBDA_FLOOR = 1e-12


@dataclass(frozen=True)
class ProjectionPriors:
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    a_lambda: float = 1.0
    b_lambda: float = 1.0

    def __post_init__(self):
        if min(self.a_sigma, self.b_sigma, self.a_lambda, self.b_lambda) <= 0:
            raise InvalidConfig("inverse-gamma hyperparameters must be positive")


@dataclass
class ProjectionPosterior:
    mean: np.ndarray  # n x K posterior means of the coefficients
    sd: np.ndarray  # n x K posterior standard deviations
    sigma2: np.ndarray  # n posterior means of the noise variance
    lam: np.ndarray  # K posterior means of the eigenvalues
    n_draws: int
    burn_in: int
    priors: ProjectionPriors = field(default_factory=ProjectionPriors)
    basis: BasisSet | None = None
    draws: dict | None = None

    @property
    def sigma2_plugin(self) -> float:
        return float(np.mean(self.sigma2))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "coef_mean.f64", self.mean)
        write_tensor(d / "coef_sd.f64", self.sd)
        write_tensor(d / "sigma2.f64", self.sigma2)
        write_tensor(d / "lambda.f64", self.lam)
        p = self.priors
        (d / "projection.txt").write_text(
            f"a_sigma = {p.a_sigma!r}\nb_sigma = {p.b_sigma!r}\n"
            f"a_lambda = {p.a_lambda!r}\nb_lambda = {p.b_lambda!r}\n"
            f"n_draws = {self.n_draws}\nburn_in = {self.burn_in}\n"
        )

    @classmethod
    def load(cls, directory, basis: BasisSet | None = None) -> "ProjectionPosterior":
        d = Path(directory)
        kv = {}
        for line in (d / "projection.txt").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        priors = ProjectionPriors(*(float(kv[k]) for k in ("a_sigma", "b_sigma", "a_lambda", "b_lambda")))
        return cls(
            mean=read_tensor(d / "coef_mean.f64"),
            sd=read_tensor(d / "coef_sd.f64"),
            sigma2=read_tensor(d / "sigma2.f64"),
            lam=read_tensor(d / "lambda.f64"),
            n_draws=int(kv["n_draws"]),
            burn_in=int(kv["burn_in"]),
            priors=priors,
            basis=basis,
        )


def _centered(images, basis: BasisSet):
    X = np.atleast_2d(np.asarray(images, dtype=np.float64))
    if X.shape[1] != basis.grid.size:
        raise ShapeError(f"image length {X.shape[1]} != basis grid size {basis.grid.size}")
    if basis.centering is not None:
        X = X - basis.centering
    return X


def gibbs_project(images, basis: BasisSet, priors: ProjectionPriors | None = None, iters: int = 1000,
                  burn_in: int = 200, rng=None, fix_lambda=None, fix_sigma2=None,
                  keep_draws: bool = False) -> ProjectionPosterior:
    """Blocked Gibbs sampler for the basis-expansion model of a stack of images.

    ``fix_lambda`` / ``fix_sigma2`` pin those parameters (used by the conjugate
    checks). The returned posterior carries ``basis`` with eigenvalues set to
    the lambda posterior means; its columns, and the coefficient columns, are
    reordered so the eigenvalues are non-increasing.
    """
    priors = priors or ProjectionPriors()
    if rng is None:
        raise InvalidConfig("gibbs_project needs an rng")
    if not 0 <= burn_in < iters:
        raise InvalidConfig(f"need 0 <= burn_in < iters, got {burn_in}, {iters}")
    X = _centered(images, basis)
    if not np.all(np.isfinite(X)):
        raise InvalidInput("images contain non-finite values")
    n, V = X.shape
    K = basis.K
    Z = X @ basis.psi
    out_of_span = np.maximum(np.einsum("ij,ij->i", X, X) - np.einsum("ij,ij->i", Z, Z), 0.0)

    if fix_lambda is not None:
        lam = np.broadcast_to(np.asarray(fix_lambda, dtype=np.float64), (K,)).copy()
    else:
        lam = np.maximum(Z.var(axis=0) if n > 1 else Z[0] ** 2, LAMBDA_FLOOR)
    if fix_sigma2 is not None:
        sigma2 = np.broadcast_to(np.asarray(fix_sigma2, dtype=np.float64), (n,)).copy()
    else:
        sigma2 = np.maximum(out_of_span / V, SIGMA2_FLOOR)

    shape_sigma = priors.a_sigma + 0.5 * V
    shape_lam = priors.a_lambda + 0.5 * n
    sum_x = np.zeros((n, K))
    sum_x2 = np.zeros((n, K))
    sum_s2 = np.zeros(n)
    sum_lam = np.zeros(K)
    kept = 0
    floored = False
    trace = {"x": [], "sigma2": [], "lam": []} if keep_draws else None

    for it in range(iters):
        # x | sigma2, lambda: closed form without dividing by a zero variance
        denom = lam[None, :] + sigma2[:, None]
        m = Z * (lam[None, :] / denom)
        var = lam[None, :] * sigma2[:, None] / denom
        x = m + np.sqrt(var) * rng.standard_normal((n, K))
        if fix_sigma2 is None:
            d = Z - x
            rss = out_of_span + np.einsum("ij,ij->i", d, d)
            sigma2 = (priors.b_sigma + 0.5 * rss) / rng.standard_gamma(shape_sigma, size=n)
            low = sigma2 < SIGMA2_FLOOR
            if np.any(low):
                floored = True
                sigma2[low] = SIGMA2_FLOOR
        if fix_lambda is None:
            lam = (priors.b_lambda + 0.5 * np.einsum("ij,ij->j", x, x)) / rng.standard_gamma(shape_lam, size=K)
            lam = np.maximum(lam, LAMBDA_FLOOR)
        if it >= burn_in:
            kept += 1
            sum_x += x
            sum_x2 += x * x
            sum_s2 += sigma2
            sum_lam += lam
            if keep_draws:
                trace["x"].append(x.copy())
                trace["sigma2"].append(sigma2.copy())
                trace["lam"].append(lam.copy())
    if floored:
        warnings.warn(DegenerateNoise("noise variance reached the numerical floor"), stacklevel=2)

    mean = sum_x / kept
    sd = np.sqrt(np.maximum(sum_x2 / kept - mean * mean, 0.0))
    lam_mean = sum_lam / kept
    order = np.argsort(-lam_mean, kind="stable")
    draws = None
    if keep_draws:
        draws = {
            "x": np.stack(trace["x"])[:, :, order],
            "sigma2": np.stack(trace["sigma2"]),
            "lam": np.stack(trace["lam"])[:, order],
        }
    return ProjectionPosterior(
        mean=mean[:, order],
        sd=sd[:, order],
        sigma2=sum_s2 / kept,
        lam=lam_mean[order],
        n_draws=kept,
        burn_in=burn_in,
        priors=priors,
        basis=basis.with_eigenvalues(lam_mean),
        draws=draws,
    )


def project_new(images, basis: BasisSet, sigma2):
    """Conjugate posterior of coefficients for new images at fixed eigenvalues and noise.

    Returns ``(mean, sd)``, each ``n x K`` (or length K for a single image).
    """
    if basis.eigenvalues is None:
        raise InvalidState("basis eigenvalues are unset; run gibbs_project first")
    single = np.ndim(images) == 1
    X = _centered(images, basis)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise InvalidInput("sigma2 must be non-negative")
    s2 = np.broadcast_to(sigma2, (X.shape[0],))[:, None]
    lam = basis.eigenvalues[None, :]
    Z = X @ basis.psi
    denom = lam + s2
    with np.errstate(invalid="ignore", divide="ignore"):
        shrink = np.where(denom > 0, lam / denom, 0.0)
        var = np.where(denom > 0, lam * s2 / denom, 0.0)
    mean, sd = Z * shrink, np.sqrt(var) * np.ones_like(Z)
    if single:
        return mean[0], sd[0]
    return mean, sd


def simulate_images(basis: BasisSet, n: int, sigma2: float, rng, return_coefs: bool = False):
    """Draw ``x_i ~ N(0, Lambda)`` and emit ``Psi x_i`` plus N(0, sigma2) voxel noise."""
    if basis.eigenvalues is None:
        raise InvalidState("basis eigenvalues are unset")
    x = rng.standard_normal((n, basis.K)) * np.sqrt(basis.eigenvalues)
    X = x @ basis.psi.T
    if sigma2 > 0:
        X = X + np.sqrt(sigma2) * rng.standard_normal(X.shape)
    return (X, x) if return_coefs else X
