"""Importance of each projected-predictor dimension for predicting the outcome.

``q(x, y)`` is the particle average of the input gradient of
``log N(y | net(x), diag(lambda_y))``; the importance measure is the mean of
``|q|`` over evaluation pairs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ShapeError
from .mlp import grad_input
from .svgd import ParticleEnsemble, ensemble_predict


def importance_fn(ensemble: ParticleEnsemble, X, Y) -> np.ndarray:
    """``q`` at each row of ``(X, Y)``; returns an array shaped like ``X``."""
    single = np.ndim(X) == 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"{X.shape[0]} x rows vs {Y.shape[0]} y rows")
    if Y.shape[1] != ensemble.layout.k_y:
        raise ShapeError(f"y width {Y.shape[1]} != K_y {ensemble.layout.k_y}")
    means, lams = ensemble_predict(ensemble, X)
    q = np.zeros_like(X)
    for s in range(ensemble.n_particles):
        q += grad_input(ensemble.params(s), X, (Y - means[s]) / lams[s])
    q /= ensemble.n_particles
    return q[0] if single else q


@dataclass
class ImportanceReport:
    im: np.ndarray
    n_eval: int
    n_particles: int
    blocks: list  # one label per dimension

    @property
    def rank(self) -> np.ndarray:
        """1 for the most important dimension; ties keep index order."""
        order = np.argsort(-self.im, kind="stable")
        rank = np.empty(self.im.size, dtype=int)
        rank[order] = np.arange(1, self.im.size + 1)
        return rank

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dimension", "importance", "rank", "block"])
            for k, (v, r, b) in enumerate(zip(self.im, self.rank, self.blocks)):
                w.writerow([k, repr(float(v)), int(r), b])


def block_labels(widths: dict) -> list:
    """Expand ``{"label": width, ...}`` (insertion ordered) into per-dimension labels."""
    out = []
    for label, width in widths.items():
        out += [label] * int(width)
    return out


def importance_measure(ensemble: ParticleEnsemble, X, Y, blocks=None, chunk: int = 1024) -> ImportanceReport:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise InvalidInput("need at least one evaluation pair")
    total = np.zeros(X.shape[1])
    for start in range(0, n, chunk):
        total += np.abs(importance_fn(ensemble, X[start : start + chunk], Y[start : start + chunk])).sum(axis=0)
    if blocks is None:
        blocks = ["x"] * X.shape[1]
    if len(blocks) != X.shape[1]:
        raise ShapeError(f"{len(blocks)} block labels for {X.shape[1]} dimensions")
    return ImportanceReport(total / n, n, ensemble.n_particles, list(blocks))


def linear_oracle_im(B, lam) -> np.ndarray:
    """Exact importance for ``y | x ~ N(B x, diag(lam))``.

    ``q = B^T Lambda^{-1} (y - B x)`` is Gaussian with covariance
    ``B^T Lambda^{-1} B`` whatever the law of ``x``, so ``E|q_k|`` is a
    half-normal mean.
    """
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B.shape[0],))
    if np.any(lam <= 0):
        raise InvalidInput("noise eigenvalues must be positive")
    var = np.einsum("kj,k,kj->j", B, 1.0 / lam, B)
    return np.sqrt(2.0 / np.pi) * np.sqrt(var)
