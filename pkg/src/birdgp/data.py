"""Datasets: IDX ingestion, the paired-image constructions, simulation scenarios, and baselines."""
from __future__ import annotations

import csv
import gzip
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from .basis import BasisSet, VoxelGrid, fixed_kernel_basis, kernel_matrix
from .errors import (
    DegenerateSplit,
    FormatError,
    GridMismatch,
    InsufficientData,
    InvalidConfig,
    InvalidInput,
    InvalidState,
    ShapeError,
)
from .mlp import MlpArch, MlpParams, forward, init_params
from .numerics import quantile, read_tensor, write_tensor

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


# ---------------------------------------------------------------- IDX files

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(data))
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise FormatError(f"{path}: truncated dimension block", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:end])
    count = int(np.prod(dims))
    if len(data) < end + count:
        raise FormatError(f"{path}: payload has {len(data) - end} of {count} bytes", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=end).reshape(dims)


def load_idx(images_path, labels_path=None):
    """Images scaled to [0, 1] as ``n x (rows*cols)``, their grid, and labels (or None)."""
    raw = _read_idx(images_path, IDX_IMAGES)
    n, rows, cols = raw.shape
    X = raw.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS).astype(np.int64)
        if labels.shape[0] != n:
            raise FormatError(f"{labels.shape[0]} labels for {n} images", offset=8)
    return X, VoxelGrid.regular(rows, cols), labels


def write_idx(path, array) -> None:
    """Write uint8 images (``n x rows x cols``) or labels (``n``) in IDX layout; ``.gz`` compresses."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise InvalidInput("IDX payload must be uint8")
    if a.ndim == 3:
        magic = IDX_IMAGES
    elif a.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ShapeError("IDX arrays are n x rows x cols images or length-n labels")
    blob = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


# ---------------------------------------------------------------- paired datasets

@dataclass
class PairedDataset:
    predictors: list  # one n x V_c matrix per channel
    x_grids: list
    outcomes: np.ndarray
    y_grid: VoxelGrid
    labels: np.ndarray | None = None
    covariates: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.outcomes.shape[0]
        if len(self.predictors) != len(self.x_grids):
            raise ShapeError("one grid per predictor channel")
        for X, g in zip(self.predictors, self.x_grids):
            if X.shape != (n, g.size):
                raise ShapeError(f"predictor channel {X.shape} vs n = {n}, grid {g.size}")
        if self.outcomes.shape[1] != self.y_grid.size:
            raise ShapeError("outcome width does not match its grid")
        for extra in (self.labels, self.covariates):
            if extra is not None and len(extra) != n:
                raise ShapeError("labels and covariates need n rows")

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx)
        return PairedDataset(
            [X[idx] for X in self.predictors], self.x_grids, self.outcomes[idx], self.y_grid,
            None if self.labels is None else self.labels[idx],
            None if self.covariates is None else self.covariates[idx],
            dict(self.meta),
        )

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for c, (X, g) in enumerate(zip(self.predictors, self.x_grids)):
            write_tensor(d / f"predictor_{c}.f64", X)
            g.save(d / f"x_grid_{c}")
        write_tensor(d / "outcomes.f64", self.outcomes)
        self.y_grid.save(d / "y_grid")
        if self.covariates is not None:
            write_tensor(d / "covariates.f64", self.covariates)
        if self.labels is not None:
            with open(d / "labels.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["subject", "label"])
                w.writerows(enumerate(self.labels.tolist()))
        lines = [f"n = {self.n}", f"channels = {len(self.predictors)}"]
        lines += [f"{k} = {v}" for k, v in sorted(self.meta.items())]
        (d / "dataset.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "PairedDataset":
        d = Path(directory)
        kv = {}
        for line in (d / "dataset.txt").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        channels = int(kv.pop("channels"))
        kv.pop("n")
        labels = None
        if (d / "labels.csv").exists():
            with open(d / "labels.csv") as fh:
                rows = list(csv.reader(fh))[1:]
            labels = np.array([int(r[1]) for r in rows])
        cov = read_tensor(d / "covariates.f64") if (d / "covariates.f64").exists() else None
        return cls(
            [read_tensor(d / f"predictor_{c}.f64") for c in range(channels)],
            [VoxelGrid.load(d / f"x_grid_{c}") for c in range(channels)],
            read_tensor(d / "outcomes.f64"),
            VoxelGrid.load(d / "y_grid"),
            labels,
            None if cov is None else np.atleast_2d(cov),
            kv,
        )


# ---------------------------------------------------------------- MNIST arithmetic

@dataclass(frozen=True)
class GlyphConfig:
    length: tuple = (12, 20)
    thickness: tuple = (2, 4)
    jitter: int = 3
    intensity: float = 1.0


def sign_glyph(plus: bool, rng, cfg: GlyphConfig = GlyphConfig(), size: int = 28) -> np.ndarray:
    """A 28 x 28 panel with a horizontal bar, plus a vertical bar for "+"."""
    panel = np.zeros((size, size))
    cy = size // 2 + int(rng.integers(-cfg.jitter, cfg.jitter + 1))
    cx = size // 2 + int(rng.integers(-cfg.jitter, cfg.jitter + 1))

    def bar(horizontal: bool):
        length = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
        thick = int(rng.integers(cfg.thickness[0], cfg.thickness[1] + 1))
        r0, c0 = cy - thick // 2, cx - length // 2
        if horizontal:
            rows, cols = slice(max(r0, 0), min(r0 + thick, size)), slice(max(c0, 0), min(c0 + length, size))
        else:
            rows = slice(max(cy - length // 2, 0), min(cy - length // 2 + length, size))
            cols = slice(max(cx - thick // 2, 0), min(cx - thick // 2 + thick, size))
        panel[rows, cols] = cfg.intensity

    bar(True)
    if plus:
        bar(False)
    return panel


def make_mnist_arithmetic(images, labels, n: int, rng, glyph: GlyphConfig = GlyphConfig()) -> PairedDataset:
    """Predictor ``[2][sign][1]`` (28 x 84); outcome a "3" for "+" and a "1" for "-".

    Digits are drawn without replacement separately for each slot (left "2",
    right "1", outcome "3", outcome "1").
    """
    X = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if X.shape[1] != 784:
        raise ShapeError("expects 28 x 28 digit images")
    plus = rng.random(n) < 0.5
    pools = {d: np.flatnonzero(labels == d) for d in (1, 2, 3)}
    need = {"2": n, "1": n, "3": int(plus.sum()), "1out": int((~plus).sum())}
    avail = {"2": pools[2].size, "1": pools[1].size, "3": pools[3].size, "1out": pools[1].size}
    for k in need:
        if need[k] > avail[k]:
            raise InsufficientData(f"need {need[k]} source images for slot {k}, have {avail[k]}")
    twos = rng.choice(pools[2], size=n, replace=False)
    ones = rng.choice(pools[1], size=n, replace=False)
    threes = rng.choice(pools[3], size=need["3"], replace=False)
    ones_out = rng.choice(pools[1], size=need["1out"], replace=False)
    pred = np.empty((n, 28, 84))
    out = np.empty((n, 784))
    out_labels = np.where(plus, 3, 1)
    out[plus] = X[threes]
    out[~plus] = X[ones_out]
    for i in range(n):
        pred[i, :, :28] = X[twos[i]].reshape(28, 28)
        pred[i, :, 28:56] = sign_glyph(bool(plus[i]), rng, glyph)
        pred[i, :, 56:] = X[ones[i]].reshape(28, 28)
    return PairedDataset(
        [pred.reshape(n, -1)], [VoxelGrid.regular(28, 84)], out, VoxelGrid.regular(28, 28),
        labels=out_labels, meta={"construction": "mnist_arithmetic"},
    )


# ---------------------------------------------------------------- quartile split

def quartile_panels(image) -> np.ndarray:
    """Four copies of a 28 x 28 image keeping nonzero values in [Q0,Q1), [Q1,Q2), [Q2,Q3), [Q3,Q4]."""
    img = np.asarray(image, dtype=np.float64).reshape(28, 28)
    panels = np.zeros((4, 28, 28))
    nz = img[img > 0]
    if np.unique(nz).size < 4:
        warnings.warn(DegenerateSplit(f"only {np.unique(nz).size} distinct nonzero values; some bins are empty"),
                      stacklevel=2)
    if nz.size == 0:
        return panels
    q = quantile(nz, [0.0, 0.25, 0.5, 0.75, 1.0])
    pos = img > 0
    for k in range(4):
        upper = img <= q[4] if k == 3 else img < q[k + 1]
        m = pos & (img >= q[k]) & upper
        panels[k][m] = img[m]
    return panels


def make_quartile_split(images, labels=None) -> PairedDataset:
    """Predictor 28 x 112 (four intensity-bin panels side by side); outcome the original image."""
    X = np.atleast_2d(np.asarray(images, dtype=np.float64))
    if X.shape[1] != 784:
        raise ShapeError("expects 28 x 28 images")
    n = X.shape[0]
    pred = np.empty((n, 28, 112))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateSplit)
        for i in range(n):
            pred[i] = np.concatenate(list(quartile_panels(X[i])), axis=1)
    if caught:
        warnings.warn(DegenerateSplit(f"{len(caught)} images had fewer than 4 distinct nonzero values"), stacklevel=2)
    return PairedDataset(
        [pred.reshape(n, -1)], [VoxelGrid.regular(28, 112)], X.copy(), VoxelGrid.regular(28, 28),
        labels=None if labels is None else np.asarray(labels), meta={"construction": "quartile_split"},
    )


# ---------------------------------------------------------------- scenarios

@dataclass
class ScenarioSpec:
    scenario: int
    n: int = 714
    k_x: int = 50
    k_y: int = 50
    snr: float = 0.5
    B: np.ndarray | None = None
    network: MlpParams | None = None
    network_hidden: tuple = (200,)

    def __post_init__(self):
        if self.scenario not in (1, 2, 3):
            raise InvalidConfig(f"scenario must be 1, 2 or 3, got {self.scenario}")
        if self.n < 1:
            raise InvalidConfig("n must be positive")


def generating_basis(grid: VoxelGrid, kernel: str = "se", length_scale: float = 0.2, K: int = 50) -> BasisSet:
    """Fixed-kernel eigenbasis with eigenvalues set to the per-voxel Gram spectrum (``eig / V``)."""
    basis = fixed_kernel_basis(grid, kernel, length_scale, K)
    G = kernel_matrix(grid.normalized, grid.normalized, kernel, length_scale)
    rayleigh = np.einsum("vk,vk->k", basis.psi, G @ basis.psi) / grid.size
    return basis.with_eigenvalues(np.maximum(rayleigh, 0.0))


def default_linear_map(k_y: int, k_x: int, rng) -> np.ndarray:
    """Gaussian map with heterogeneous column scales U(0, 2), so predictor dimensions differ in importance."""
    scales = rng.uniform(0.0, 2.0, size=k_x)
    return rng.normal(size=(k_y, k_x)) * scales / np.sqrt(k_x)


def _standardise_images(X):
    sd = X.std()
    return X / sd if sd > 0 else X


def simulate_scenario(spec: ScenarioSpec, x_basis: BasisSet, y_basis: BasisSet, rng,
                      n_test: int = 0):
    """Simulated paired images plus the generating truth.

    Returns ``(train, test, truth)``; ``test`` is None when ``n_test == 0``.
    Scenarios 1 and 2 build images from coefficients with the supplied bases;
    Scenario 3 uses ``x_basis`` (eigenvalues required) for the predictors and
    a voxel-wise linear model on the same grid for the outcomes.
    """
    total = spec.n + n_test
    truth: dict = {"scenario": spec.scenario}
    if spec.scenario in (1, 2):
        x = rng.standard_normal((total, x_basis.K))
        if spec.scenario == 1:
            B = spec.B if spec.B is not None else default_linear_map(y_basis.K, x_basis.K, rng)
            if B.shape != (y_basis.K, x_basis.K):
                raise ShapeError(f"B must be {y_basis.K} x {x_basis.K}")
            mean = x @ B.T
            lam = np.ones(y_basis.K)
            truth["B"] = B
        else:
            net = spec.network
            if net is None:
                net = init_params(MlpArch((x_basis.K, *spec.network_hidden, y_basis.K)), rng)
            mean = forward(net, x)
            lam = mean.var(axis=0) / spec.snr
            if np.any(lam <= 0):
                raise InvalidState("network output is constant in some dimension; SNR undefined")
            truth["network"] = net
        y = mean + np.sqrt(lam) * rng.standard_normal(mean.shape)
        truth.update(x=x, y=y, mean=mean, lam=lam, x_psi=x_basis.psi, y_psi=y_basis.psi)
        X = x @ x_basis.psi.T
        Y = y @ y_basis.psi.T
    else:
        if x_basis.eigenvalues is None:
            raise InvalidState("scenario 3 draws predictors from the basis; set its eigenvalues")
        if not x_basis.grid.same_as(y_basis.grid):
            raise GridMismatch("scenario 3 needs predictor and outcome on the same grid")
        coefs = rng.standard_normal((total, x_basis.K)) * np.sqrt(x_basis.eigenvalues)
        X = _standardise_images(coefs @ x_basis.psi.T)
        V = X.shape[1]
        beta0 = rng.standard_normal(V)
        beta1 = rng.standard_normal(V)
        Y = beta0 + beta1 * X + rng.standard_normal(X.shape)
        truth.update(beta0=beta0, beta1=beta1)
    meta = {"scenario": spec.scenario}

    def pack(sl):
        return PairedDataset([X[sl]], [x_basis.grid], Y[sl], y_basis.grid, meta=dict(meta))

    train = pack(slice(0, spec.n))
    test = pack(slice(spec.n, total)) if n_test else None
    return train, test, truth


# ---------------------------------------------------------------- baselines

@dataclass
class VoxelRegression:
    coef: np.ndarray  # V x (2 + p): intercept, slope, covariate effects

    def predict(self, X, covariates=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = self.coef[:, 0] + self.coef[:, 1] * X
        if self.coef.shape[1] > 2:
            Z = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
            out = out + Z @ self.coef[:, 2:].T
        return out


def baseline_vr(train: PairedDataset, use_covariates: bool = False) -> VoxelRegression:
    """Per-voxel OLS ``Y(v) ~ 1 + X(v) [+ covariates]``; a constant predictor voxel gets slope 0."""
    if len(train.predictors) != 1:
        raise ShapeError("voxel-wise regression takes one predictor channel")
    if not train.x_grids[0].same_as(train.y_grid):
        raise GridMismatch("voxel-wise regression needs predictor and outcome on the same grid")
    X, Y = train.predictors[0], train.outcomes
    n, V = X.shape
    Z = train.covariates if use_covariates and train.covariates is not None else np.zeros((n, 0))
    p = Z.shape[1]
    # design per voxel: [1, x_v, Z]
    D = np.empty((V, n, 2 + p))
    D[:, :, 0] = 1.0
    D[:, :, 1] = X.T
    D[:, :, 2:] = Z[None]
    constant = np.ptp(X, axis=0) == 0
    D[constant, :, 1] = 0.0
    G = np.einsum("vni,vnj->vij", D, D)
    rhs = np.einsum("vni,nv->vi", D, Y)
    G[constant, 1, 1] = 1.0  # zero slope column -> pin slope at 0
    coef = np.linalg.solve(G, rhs[..., None])[..., 0]
    coef[constant, 1] = 0.0
    return VoxelRegression(coef)


@dataclass
class RegionRegression:
    parcels: np.ndarray  # parcel id per voxel
    intercept: dict
    slope: dict

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty_like(X)
        for r in self.intercept:
            m = self.parcels == r
            out[:, m] = self.intercept[r] + self.slope[r] * X[:, m]
        return out


def baseline_lr(train: PairedDataset, parcels) -> RegionRegression:
    """Per subject and parcel, regress outcome voxels on predictor voxels; average the fits over subjects."""
    if len(train.predictors) != 1:
        raise ShapeError("region regression takes one predictor channel")
    if not train.x_grids[0].same_as(train.y_grid):
        raise GridMismatch("region regression needs predictor and outcome on the same grid")
    parcels = np.asarray(parcels)
    if parcels.shape != (train.y_grid.size,):
        raise ShapeError("need one parcel id per voxel")
    X, Y = train.predictors[0], train.outcomes
    intercept, slope = {}, {}
    for r in np.unique(parcels):
        m = parcels == r
        xs, ys = X[:, m], Y[:, m]
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys - ys.mean(axis=1, keepdims=True)
        sxx = np.einsum("ij,ij->i", xc, xc)
        sxy = np.einsum("ij,ij->i", xc, yc)
        b = np.where(sxx > 0, sxy / np.where(sxx > 0, sxx, 1.0), 0.0)
        a = ys.mean(axis=1) - b * xs.mean(axis=1)
        intercept[r.item()] = float(a.mean())
        slope[r.item()] = float(b.mean())
    return RegionRegression(parcels, intercept, slope)


def block_parcels(grid: VoxelGrid, block: int) -> np.ndarray:
    """Parcel ids from square blocks of a regular 2-D grid."""
    if grid.shape is None or len(grid.shape) != 2:
        raise ShapeError("block parcels need a regular 2-D grid")
    rows, cols = grid.shape
    r = np.arange(rows)[:, None] // block
    c = np.arange(cols)[None, :] // block
    return (r * ((cols + block - 1) // block) + c).ravel()


# ---------------------------------------------------------------- classifier

@dataclass
class SoftmaxClassifier:
    classes: np.ndarray
    W: np.ndarray  # C x (V + 1), last column is the bias

    def scores(self, images) -> np.ndarray:
        X = np.atleast_2d(np.asarray(images, dtype=np.float64))
        return X @ self.W[:, :-1].T + self.W[:, -1]

    def classify(self, images) -> np.ndarray:
        return self.classes[np.argmax(self.scores(images), axis=1)]


def substitute_classifier(images, labels, l2: float = 1e-4, max_iter: int = 2000) -> SoftmaxClassifier:
    """Multinomial logistic regression on raw pixels, fitted by L-BFGS from zero weights."""
    X = np.atleast_2d(np.asarray(images, dtype=np.float64))
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise InvalidInput("classifier needs at least two classes")
    n, V = X.shape
    C = classes.size
    Xb = np.hstack([X, np.ones((n, 1))])
    onehot = np.zeros((n, C))
    onehot[np.arange(n), y] = 1.0

    def loss_grad(w):
        W = w.reshape(C, V + 1)
        S = Xb @ W.T
        S -= S.max(axis=1, keepdims=True)
        logZ = np.log(np.exp(S).sum(axis=1, keepdims=True))
        logp = S - logZ
        loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(W[:, :-1] ** 2)
        G = (np.exp(logp) - onehot).T @ Xb / n
        G[:, :-1] += l2 * W[:, :-1]
        return loss, G.ravel()

    res = scipy.optimize.minimize(loss_grad, np.zeros(C * (V + 1)), jac=True, method="L-BFGS-B",
                                  options={"maxiter": max_iter, "gtol": 1e-8})
    return SoftmaxClassifier(classes, res.x.reshape(C, V + 1))
