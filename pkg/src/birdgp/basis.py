"""Orthonormal basis images on voxel grids.

The data-adaptive route fits a coordinate network ``N(v)`` (voxel coordinate ->
K outputs) together with a loading matrix ``P`` so that ``P @ N(v)`` reproduces
the column of image intensities at every voxel ``v``; the network outputs on the
grid are then orthonormalised. PCA and fixed-kernel (squared-exponential,
Matern 3/2) bases are provided as comparators.

Eigenvalues are not read off singular values here. They are filled in by the
Stage-1 Gibbs sampler (:func:`birdgp.projection.gibbs_project`).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateInput,
    InvalidConfig,
    InvalidInput,
    InvalidState,
    RankDeficient,
    ResourceLimit,
    ShapeError,
    TruncatedRank,
)
from .mlp import AdamState, MlpArch, MlpParams, adam_step, backward, forward, init_params
from .numerics import gram_schmidt, read_tensor, svd_thin, write_tensor

METHODS = ("dnn", "pca", "se", "matern")
MAX_DENSE_VOXELS = 20000


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Ordered voxel coordinates. Row order of every basis and image matrix follows it."""

    coords: np.ndarray
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[1] not in (1, 2, 3):
            raise InvalidInput(f"coordinates must be V x d with d in 1..3, got {c.shape}")
        object.__setattr__(self, "coords", c)
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
            if int(np.prod(self.shape)) != c.shape[0]:
                raise InvalidInput("grid shape does not match coordinate count")

    @classmethod
    def regular(cls, *shape: int) -> "VoxelGrid":
        """Integer lattice of the given shape in row-major (C) order."""
        axes = [np.arange(s, dtype=np.float64) for s in shape]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(np.stack([m.ravel() for m in mesh], axis=1), tuple(shape))

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def bounds(self):
        return self.coords.min(axis=0), self.coords.max(axis=0)

    def normalize(self, coords=None) -> np.ndarray:
        """Affine map of each axis of the grid's extent onto [-1, 1]."""
        lo, hi = self.bounds
        c = self.coords if coords is None else np.atleast_2d(np.asarray(coords, dtype=np.float64))
        span = np.where(hi > lo, hi - lo, 1.0)
        out = 2.0 * (c - lo) / span - 1.0
        return np.where(hi > lo, out, 0.0)

    @property
    def normalized(self) -> np.ndarray:
        return self.normalize()

    def same_as(self, other: "VoxelGrid") -> bool:
        return self.coords.shape == other.coords.shape and np.array_equal(self.coords, other.coords)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lo, hi = self.bounds
        lines = [
            f"dim = {self.dim}",
            f"size = {self.size}",
            "shape = " + ("x".join(map(str, self.shape)) if self.shape else ""),
            "extent_lo = " + ",".join(repr(float(x)) for x in lo),
            "extent_hi = " + ",".join(repr(float(x)) for x in hi),
            "ordering = row-major" if self.shape else "ordering = explicit",
        ]
        (d / "grid.txt").write_text("\n".join(lines) + "\n")
        write_tensor(d / "grid_coords.f64", self.coords)

    @classmethod
    def load(cls, directory) -> "VoxelGrid":
        d = Path(directory)
        manifest = _read_manifest(d / "grid.txt")
        shape = tuple(int(s) for s in manifest["shape"].split("x")) if manifest.get("shape") else None
        return cls(read_tensor(d / "grid_coords.f64"), shape)


@dataclass(frozen=True, eq=False)
class BasisSet:
    grid: VoxelGrid
    psi: np.ndarray
    method: str
    eigenvalues: np.ndarray | None = None
    network: MlpParams | None = None
    # maps network outputs to psi: psi = network(grid) @ transform
    transform: np.ndarray | None = None
    centering: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        psi = np.ascontiguousarray(self.psi, dtype=np.float64)
        object.__setattr__(self, "psi", psi)
        if psi.ndim != 2 or psi.shape[0] != self.grid.size:
            raise ShapeError(f"psi shape {psi.shape} does not match grid of {self.grid.size} voxels")
        if self.method not in METHODS:
            raise InvalidInput(f"unknown basis method {self.method!r}")
        if np.abs(psi.T @ psi - np.eye(psi.shape[1])).max() >= 1e-8:
            raise InvalidInput("basis columns are not orthonormal")
        if self.eigenvalues is not None:
            lam = np.asarray(self.eigenvalues, dtype=np.float64)
            if lam.shape != (psi.shape[1],) or np.any(lam < 0):
                raise InvalidInput("eigenvalues must be K non-negative values")
            if np.any(np.diff(lam) > 0):
                raise InvalidInput("eigenvalues must be stored non-increasing")
            object.__setattr__(self, "eigenvalues", lam)

    @property
    def K(self) -> int:
        return self.psi.shape[1]

    def with_eigenvalues(self, lam) -> "BasisSet":
        """Attach eigenvalues, reordering columns so they are non-increasing."""
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != (self.K,):
            raise ShapeError(f"expected {self.K} eigenvalues, got {lam.shape}")
        order = np.argsort(-lam, kind="stable")
        transform = None if self.transform is None else self.transform[:, order]
        return replace(self, psi=self.psi[:, order], eigenvalues=lam[order], transform=transform)

    def evaluate(self, coords) -> np.ndarray:
        """Basis values at arbitrary coordinates (dnn method only)."""
        if self.network is None or self.transform is None:
            raise InvalidState(f"{self.method} basis has no network for off-grid evaluation")
        return forward(self.network, self.grid.normalize(coords)) @ self.transform

    def project(self, images) -> np.ndarray:
        """Least-squares coefficients ``images @ psi`` (after centering, if any)."""
        X = np.atleast_2d(np.asarray(images, dtype=np.float64))
        if self.centering is not None:
            X = X - self.centering
        return X @ self.psi

    def reconstruct(self, coefs) -> np.ndarray:
        out = np.atleast_2d(coefs) @ self.psi.T
        if self.centering is not None:
            out = out + self.centering
        return out

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.grid.save(d)
        write_tensor(d / "psi.f64", self.psi)
        if self.eigenvalues is not None:
            write_tensor(d / "eigenvalues.f64", self.eigenvalues)
        if self.centering is not None:
            write_tensor(d / "centering.f64", self.centering)
        if self.network is not None:
            self.network.save(d / "network")
            write_tensor(d / "transform.f64", self.transform)
        lines = [f"method = {self.method}", f"K = {self.K}"]
        lines += [f"{k} = {v}" for k, v in sorted(self.meta.items())]
        (d / "method.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "BasisSet":
        d = Path(directory)
        manifest = _read_manifest(d / "method.txt")
        method = manifest.pop("method")
        manifest.pop("K", None)
        opt = lambda name: read_tensor(d / name) if (d / name).exists() else None  # noqa: E731
        network = MlpParams.load(d / "network") if (d / "network").exists() else None
        return cls(
            grid=VoxelGrid.load(d),
            psi=read_tensor(d / "psi.f64"),
            method=method,
            eigenvalues=opt("eigenvalues.f64"),
            network=network,
            transform=opt("transform.f64"),
            centering=opt("centering.f64"),
            meta=manifest,
        )


def _read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# coordinate-network fit ------------------------------------------------------


@dataclass
class BasisNetConfig:
    hidden: tuple[int, ...] = (128, 128, 128, 128)
    activation: str = "relu"
    epochs: int = 1000
    batch_voxels: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    # "joint": one Adam over (P, theta)
    # "lstsq": Adam on theta, P re-solved exactly after every epoch; the stale P
    # amplifies early steps and can kill relu units, collapsing the basis rank
    p_update: str = "joint"


@dataclass
class BasisFit:
    P: np.ndarray
    net: MlpParams
    loss_trace: np.ndarray

    def raw_basis(self, grid: VoxelGrid) -> np.ndarray:
        return forward(self.net, grid.normalized)


def fit_basis_network(images, grid: VoxelGrid, K: int, cfg: BasisNetConfig | None, rng) -> BasisFit:
    """Minimise ``sum_v ||X(v) - P N(v; theta)||^2`` over ``(P, theta)``.

    Voxel minibatches; Adam with decoupled weight decay on ``theta``. The loss
    trace holds the epoch-mean squared error per image entry, accumulated over
    the minibatches of that epoch.
    """
    cfg = cfg or BasisNetConfig()
    X = np.asarray(images, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != grid.size:
        raise ShapeError(f"images {X.shape} do not match grid of {grid.size} voxels")
    n, V = X.shape
    if not 1 <= K <= min(n, V):
        raise InvalidConfig(f"K = {K} must lie in [1, min(n, V) = {min(n, V)}]")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("images contain non-finite values")
    if cfg.p_update not in ("joint", "lstsq"):
        raise InvalidConfig(f"unknown p_update {cfg.p_update!r}")

    arch = MlpArch((grid.dim, *cfg.hidden, K), cfg.activation)
    net = init_params(arch, rng)
    P = rng.normal(size=(n, K)) / np.sqrt(K)
    coords = grid.normalized
    Xt = X.T.copy()  # V x n, rows addressed by voxel
    theta = net.flatten()
    n_theta = theta.size
    state = AdamState(lr=cfg.lr)
    batch = max(1, min(cfg.batch_voxels, V))
    joint = cfg.p_update == "joint"
    if not joint:
        P = _solve_loadings(X, forward(net, coords))

    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(V)
        total = 0.0
        for start in range(0, V, batch):
            idx = order[start:start + batch]
            out, cache = forward(net, coords[idx], return_cache=True)
            R = Xt[idx] - out @ P.T  # B x n
            total += float(np.einsum("ij,ij->", R, R))
            scale = 2.0 / (n * idx.size)
            G = -scale * (R @ P)  # cotangent w.r.t. network outputs
            g_theta, _ = backward(net, cache, G)
            if joint:
                g_P = -scale * (R.T @ out)
                flat = np.concatenate([theta, P.ravel()])
                state, flat = adam_step(state, flat, np.concatenate([g_theta, g_P.ravel()]))
                theta, P = flat[:n_theta], flat[n_theta:].reshape(n, K)
            else:
                state, theta = adam_step(state, theta, g_theta)
            theta = theta * (1.0 - cfg.lr * cfg.weight_decay)
            net = MlpParams.unflatten(arch, theta)
        if not joint:
            P = _solve_loadings(X, forward(net, coords))
        trace.append(total / (n * V))
    return BasisFit(P, net, np.array(trace))


def _solve_loadings(X, N):
    """Least-squares P for fixed network outputs N (V x K)."""
    sol, *_ = np.linalg.lstsq(N, X.T, rcond=None)
    return sol.T


def orthonormalize(raw, strategy: str = "svd", grid: VoxelGrid | None = None, method: str = "dnn",
                   network: MlpParams | None = None) -> BasisSet:
    """Orthonormal basis spanning the columns of ``raw`` (V x K)."""
    raw = np.asarray(raw, dtype=np.float64)
    if grid is None:
        grid = VoxelGrid(np.arange(raw.shape[0], dtype=np.float64))
    if strategy == "svd":
        U, s, Vt = svd_thin(raw)
        keep = s >= 1e-10 * s[0] if s.size and s[0] > 0 else np.zeros(s.size, bool)
        rank = int(keep.sum())
        if rank < raw.shape[1]:
            warnings.warn(
                TruncatedRank(f"raw basis has numerical rank {rank} < {raw.shape[1]}; truncating", rank=rank),
                stacklevel=2,
            )
        psi = U[:, :rank]
        transform = Vt[:rank].T / s[:rank]
    elif strategy == "gram_schmidt":
        psi = gram_schmidt(raw)
        transform = np.linalg.lstsq(raw, psi, rcond=None)[0]
    else:
        raise InvalidConfig(f"unknown orthonormalisation strategy {strategy!r}")
    return BasisSet(
        grid, psi, method,
        network=network,
        transform=transform if network is not None else None,
        meta={"orthonormalization": strategy},
    )


def learn_basis(images, grid: VoxelGrid, K: int, cfg: BasisNetConfig | None, rng,
                strategy: str = "svd") -> tuple[BasisSet, BasisFit]:
    """Coordinate-network fit followed by orthonormalisation of its grid outputs."""
    fit = fit_basis_network(images, grid, K, cfg, rng)
    basis = orthonormalize(fit.raw_basis(grid), strategy, grid, "dnn", network=fit.net)
    return basis, fit


def pca_basis(images, K: int, grid: VoxelGrid | None = None) -> BasisSet:
    """Top-K right singular vectors of the column-centred image matrix.

    A single image is not centred; its normalised copy is the only component.
    """
    X = np.asarray(images, dtype=np.float64)
    n, V = X.shape
    if not 1 <= K <= min(n, V):
        raise InvalidConfig(f"K = {K} must lie in [1, min(n, V) = {min(n, V)}]")
    grid = grid or VoxelGrid(np.arange(V, dtype=np.float64))
    center = X.mean(axis=0) if n > 1 else np.zeros(V)
    Xc = X - center
    # comparator only: top-K eigenpairs of the smaller Gram matrix
    small = Xc @ Xc.T if V >= n else Xc.T @ Xc
    m = small.shape[0]
    evals, evecs = scipy.linalg.eigh(small, subset_by_index=(m - K, m - 1))
    order = np.argsort(-evals, kind="stable")
    evals, evecs = np.maximum(evals[order], 0.0), evecs[:, order]
    s = np.sqrt(evals)
    if V >= n:
        if s[-1] <= 1e-12 * max(s[0], 1e-300):
            raise RankDeficient(f"centred images have rank below K = {K}")
        psi = gram_schmidt(Xc.T @ evecs / s)
    else:
        psi = evecs
    return BasisSet(grid, psi, "pca", centering=center, meta={"singular_values": _fmt(s[:K])})


def _fmt(values) -> str:
    return ",".join(f"{v:.6g}" for v in values)


def kernel_matrix(A, B, kernel: str, length_scale: float) -> np.ndarray:
    if not length_scale > 0:
        raise InvalidInput("length scale must be positive")
    d2 = (
        np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    )
    d2 = np.maximum(d2, 0.0)
    if kernel == "se":
        return np.exp(-0.5 * d2 / length_scale**2)
    if kernel == "matern":
        r = np.sqrt(3.0 * d2) / length_scale
        return (1.0 + r) * np.exp(-r)
    raise InvalidConfig(f"unknown kernel {kernel!r}")


def fixed_kernel_basis(grid: VoxelGrid, kernel: str, length_scale: float, K: int,
                       subsample: int | None = None, rng=None) -> BasisSet:
    """Top-K eigenvectors of the kernel Gram matrix on normalised grid coordinates.

    Grids above ``MAX_DENSE_VOXELS`` need ``subsample``: the eigenproblem is
    solved on that many random voxels and extended to the grid (Nystrom).
    """
    coords = grid.normalized
    V = grid.size
    if not 1 <= K <= V:
        raise InvalidConfig(f"K = {K} must lie in [1, {V}]")
    if V <= MAX_DENSE_VOXELS and subsample is None:
        G = kernel_matrix(coords, coords, kernel, length_scale)
        evals, evecs = scipy.linalg.eigh(G, subset_by_index=(V - K, V - 1))
        order = np.argsort(-evals)
        psi = gram_schmidt(evecs[:, order])
        evals = evals[order]
    else:
        if subsample is None:
            raise ResourceLimit(f"{V} voxels exceed the dense limit {MAX_DENSE_VOXELS}; set subsample")
        if rng is None:
            raise InvalidConfig("subsampled kernel basis needs an rng")
        m = min(subsample, V)
        if K > m:
            raise InvalidConfig("K exceeds the subsample size")
        sub = np.sort(rng.choice(V, size=m, replace=False))
        G = kernel_matrix(coords[sub], coords[sub], kernel, length_scale)
        evals, evecs = scipy.linalg.eigh(G, subset_by_index=(m - K, m - 1))
        order = np.argsort(-evals)
        evals, evecs = evals[order], evecs[:, order]
        ext = kernel_matrix(coords, coords[sub], kernel, length_scale) @ evecs / evals
        psi = svd_thin(ext)[0]
    return BasisSet(
        grid, psi, kernel,
        meta={"length_scale": length_scale, "gram_eigenvalues": _fmt(evals)},
    )


def variance_explained(images, basis: BasisSet, k: int) -> float:
    """Share of image sum-of-squares captured by projection on the first k columns.

    Centred by the stored mean for PCA bases, uncentred otherwise.
    """
    if not 1 <= k <= basis.K:
        raise InvalidInput(f"k = {k} outside [1, {basis.K}]")
    X = np.asarray(images, dtype=np.float64)
    if basis.centering is not None:
        X = X - basis.centering
    total = float(np.einsum("ij,ij->", X, X))
    if total == 0.0:
        raise DegenerateInput("images have zero total variance")
    C = X @ basis.psi[:, :k]
    return float(np.einsum("ij,ij->", C, C) / total)
