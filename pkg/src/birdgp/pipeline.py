"""Two-stage fit (basis learning + projection, then the particle network) and prediction."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import BasisNetConfig, BasisSet, VoxelGrid, fixed_kernel_basis, learn_basis, pca_basis
from .errors import BirdGPError, InvalidConfig, InvalidInput, ShapeError
from .mlp import MlpArch
from .numerics import make_rng, read_tensor, write_tensor
from .projection import ProjectionPosterior, ProjectionPriors, gibbs_project, project_new
from .svgd import ParticleEnsemble, SvgdConfig, SvgdTrace, ensemble_predict, init_ensemble, svgd_fit

STAGES = (
    "kernel_learning_predictors",
    "kernel_learning_outcomes",
    "refit_predictors",
    "refit_outcomes",
    "svgd",
)

# RNG stream ids; channel c adds c
STREAM_X_BASIS = 100
STREAM_Y_BASIS = 1
STREAM_X_GIBBS = 200
STREAM_Y_GIBBS = 2
STREAM_SVGD_INIT = 3
STREAM_SVGD_FIT = 4


@dataclass
class PipelineConfig:
    k_x: int = 50
    k_y: int = 50
    basis_method: str = "dnn"
    length_scale: float = 0.2  # fixed kernels, in normalised [-1, 1] coordinates
    kernel_subsample: int | None = None
    orthonormalization: str = "svd"
    basis_net: BasisNetConfig = field(default_factory=BasisNetConfig)
    priors: ProjectionPriors = field(default_factory=ProjectionPriors)
    gibbs_iters: int = 1000
    gibbs_burn_in: int = 200
    bnn_hidden: tuple = (200,)
    bnn_activation: str = "relu"
    svgd: SvgdConfig = field(default_factory=SvgdConfig)
    seed_lambda_from_projection: bool = True
    seed: int = 0


class StageError(BirdGPError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class FittedModel:
    x_bases: list  # BasisSet per predictor channel, eigenvalues attached
    x_sigma2: np.ndarray  # plug-in noise variance per channel
    y_basis: BasisSet
    y_sigma2: float
    ensemble: ParticleEnsemble
    covariate_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    covariate_scale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    timings: dict = field(default_factory=dict)
    train_x: np.ndarray | None = None  # network inputs of the training set
    train_y: np.ndarray | None = None  # projected training outcomes
    trace: SvgdTrace | None = None

    def __post_init__(self):
        width = sum(b.K for b in self.x_bases) + self.n_covariates
        if self.ensemble.arch.layer_sizes[0] != width:
            raise ShapeError(f"network input {self.ensemble.arch.layer_sizes[0]} != channel K sum + covariates {width}")
        if self.ensemble.layout.k_y != self.y_basis.K:
            raise ShapeError("network output width != outcome basis size")

    @property
    def n_covariates(self) -> int:
        return int(np.size(self.covariate_mean))

    @property
    def block_widths(self) -> dict:
        widths = {f"channel{c}": b.K for c, b in enumerate(self.x_bases)}
        if self.n_covariates:
            widths["covariate"] = self.n_covariates
        return widths

    def inputs(self, predictors, covariates=None) -> np.ndarray:
        """Network inputs for new subjects: plug-in projections of every channel plus scaled covariates."""
        predictors = _as_channels(predictors)
        if len(predictors) != len(self.x_bases):
            raise ShapeError(f"expected {len(self.x_bases)} predictor channels, got {len(predictors)}")
        parts = [project_new(X, b, s2)[0] for X, b, s2 in zip(predictors, self.x_bases, self.x_sigma2)]
        parts = [np.atleast_2d(p) for p in parts]
        if self.n_covariates:
            if covariates is None:
                raise InvalidInput("model was fitted with covariates; supply them")
            Z = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
            parts.append((Z - self.covariate_mean) / self.covariate_scale)
        return np.hstack(parts)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for c, b in enumerate(self.x_bases):
            b.save(d / f"x_basis_{c}")
        self.y_basis.save(d / "y_basis")
        self.ensemble.save(d / "ensemble")
        write_tensor(d / "x_sigma2.f64", np.asarray(self.x_sigma2, dtype=np.float64))
        write_tensor(d / "covariate_mean.f64", self.covariate_mean)
        write_tensor(d / "covariate_scale.f64", self.covariate_scale)
        if self.train_x is not None:
            write_tensor(d / "train_x.f64", self.train_x)
            write_tensor(d / "train_y.f64", self.train_y)
        lines = [f"n_channels = {len(self.x_bases)}", f"y_sigma2 = {self.y_sigma2!r}"]
        (d / "model.txt").write_text("\n".join(lines) + "\n")
        # wall times vary run to run; kept apart so model files replay bitwise
        if self.timings:
            write_timings(d / "timings.csv", self.timings)
        if self.trace is not None:
            self.trace.to_csv(d / "svgd_trace.csv")

    @classmethod
    def load(cls, directory) -> "FittedModel":
        d = Path(directory)
        kv = {}
        for line in (d / "model.txt").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        n_ch = int(kv["n_channels"])
        timings = read_timings(d / "timings.csv") if (d / "timings.csv").exists() else {}
        opt = lambda name: read_tensor(d / name) if (d / name).exists() else None  # noqa: E731
        return cls(
            x_bases=[BasisSet.load(d / f"x_basis_{c}") for c in range(n_ch)],
            x_sigma2=np.atleast_1d(read_tensor(d / "x_sigma2.f64")),
            y_basis=BasisSet.load(d / "y_basis"),
            y_sigma2=float(kv["y_sigma2"]),
            ensemble=ParticleEnsemble.load(d / "ensemble"),
            covariate_mean=np.atleast_1d(read_tensor(d / "covariate_mean.f64")),
            covariate_scale=np.atleast_1d(read_tensor(d / "covariate_scale.f64")),
            timings=timings,
            train_x=opt("train_x.f64"),
            train_y=opt("train_y.f64"),
        )


def write_timings(path, timings: dict) -> None:
    with open(path, "w") as fh:
        fh.write("stage,seconds\n")
        for k, v in timings.items():
            fh.write(f"{k},{v:.3f}\n")


def read_timings(path) -> dict:
    rows = Path(path).read_text().splitlines()[1:]
    return {r.split(",")[0]: float(r.split(",")[1]) for r in rows if r}


def _as_channels(predictors) -> list:
    if isinstance(predictors, np.ndarray) and predictors.ndim == 2:
        return [predictors]
    return [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in predictors]


def build_basis(images, grid: VoxelGrid, K: int, cfg: PipelineConfig, rng) -> BasisSet:
    if cfg.basis_method == "dnn":
        return learn_basis(images, grid, K, cfg.basis_net, rng, cfg.orthonormalization)[0]
    if cfg.basis_method == "pca":
        return pca_basis(images, K, grid)
    if cfg.basis_method in ("se", "matern"):
        return fixed_kernel_basis(grid, cfg.basis_method, cfg.length_scale, K, cfg.kernel_subsample, rng)
    raise InvalidConfig(f"unknown basis method {cfg.basis_method!r}")


class _Timer:
    def __init__(self, timings: dict, stage: str):
        self.timings, self.stage = timings, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.stage] = self.timings.get(self.stage, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.stage, exc) from exc
        return False


def fit_model(predictors, x_grids, outcomes, y_grid: VoxelGrid, cfg: PipelineConfig | None = None,
              covariates=None, x_bases=None, y_basis=None, log=None) -> FittedModel:
    """Run both stages. Pre-built ``x_bases`` / ``y_basis`` skip basis learning for those images."""
    cfg = cfg or PipelineConfig()
    predictors = _as_channels(predictors)
    if isinstance(x_grids, VoxelGrid):
        x_grids = [x_grids]
    Y = np.atleast_2d(np.asarray(outcomes, dtype=np.float64))
    n = Y.shape[0]
    if len(x_grids) != len(predictors) or any(X.shape[0] != n for X in predictors):
        raise ShapeError("every predictor channel needs a grid and n rows")
    k_x = cfg.k_x if isinstance(cfg.k_x, (tuple, list)) else [cfg.k_x] * len(predictors)
    timings: dict = {}
    say = log or (lambda msg: None)

    with _Timer(timings, "kernel_learning_predictors"):
        if x_bases is None:
            x_bases = [
                build_basis(X, g, k, cfg, make_rng(cfg.seed, STREAM_X_BASIS + c))
                for c, (X, g, k) in enumerate(zip(predictors, x_grids, k_x))
            ]
    say(f"predictor bases ready ({timings['kernel_learning_predictors']:.1f}s)")
    with _Timer(timings, "kernel_learning_outcomes"):
        if y_basis is None:
            y_basis = build_basis(Y, y_grid, cfg.k_y, cfg, make_rng(cfg.seed, STREAM_Y_BASIS))
    say(f"outcome basis ready ({timings['kernel_learning_outcomes']:.1f}s)")

    with _Timer(timings, "refit_predictors"):
        x_posts = [
            gibbs_project(X, b, cfg.priors, cfg.gibbs_iters, cfg.gibbs_burn_in, make_rng(cfg.seed, STREAM_X_GIBBS + c))
            for c, (X, b) in enumerate(zip(predictors, x_bases))
        ]
    say(f"predictor coefficients refitted ({timings['refit_predictors']:.1f}s)")
    with _Timer(timings, "refit_outcomes"):
        y_post: ProjectionPosterior = gibbs_project(
            Y, y_basis, cfg.priors, cfg.gibbs_iters, cfg.gibbs_burn_in, make_rng(cfg.seed, STREAM_Y_GIBBS)
        )
    say(f"outcome coefficients refitted ({timings['refit_outcomes']:.1f}s)")

    parts = [p.mean for p in x_posts]
    cov_mean, cov_scale = np.zeros(0), np.zeros(0)
    if covariates is not None:
        Z = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        if Z.shape[0] != n:
            raise ShapeError("covariates need n rows")
        cov_mean = Z.mean(axis=0)
        cov_scale = Z.std(axis=0)
        cov_scale[cov_scale == 0] = 1.0
        parts.append((Z - cov_mean) / cov_scale)
    Xin = np.hstack(parts)
    Yc = y_post.mean

    with _Timer(timings, "svgd"):
        arch = MlpArch((Xin.shape[1], *cfg.bnn_hidden, Yc.shape[1]), cfg.bnn_activation)
        lam0 = y_post.lam if cfg.seed_lambda_from_projection else None
        ens = init_ensemble(arch, Yc.shape[1], cfg.svgd, make_rng(cfg.seed, STREAM_SVGD_INIT), lambda_init=lam0)
        svgd_cfg = cfg.svgd
        if svgd_cfg.batch_size > n:
            svgd_cfg = replace(svgd_cfg, batch_size=n)
        ens, trace = svgd_fit(Xin, Yc, ens, svgd_cfg, make_rng(cfg.seed, STREAM_SVGD_FIT))
    say(f"svgd done ({timings['svgd']:.1f}s)")

    return FittedModel(
        x_bases=[p.basis for p in x_posts],
        x_sigma2=np.array([p.sigma2_plugin for p in x_posts]),
        y_basis=y_post.basis,
        y_sigma2=y_post.sigma2_plugin,
        ensemble=ens,
        covariate_mean=cov_mean,
        covariate_scale=cov_scale,
        timings=timings,
        train_x=Xin,
        train_y=Yc,
        trace=trace,
    )


def predict_coefficients(model: FittedModel, predictors, covariates=None) -> np.ndarray:
    """Particle-averaged outcome coefficients (n x K_y)."""
    Xin = model.inputs(predictors, covariates)
    return ensemble_predict(model.ensemble, Xin)[0].mean(axis=0)


def predict_mean(model: FittedModel, predictors, covariates=None) -> np.ndarray:
    """Point prediction of the outcome images (n x V_y). Deterministic."""
    return model.y_basis.reconstruct(predict_coefficients(model, predictors, covariates))


def predict_intervals(model: FittedModel, predictors, covariates=None, levels=(0.95,), draws_per_particle: int = 20,
                      rng=None) -> dict:
    """Equal-tailed predictive intervals per voxel from ``S x draws_per_particle`` draws per subject.

    Every level is read from the same draws, so intervals for nested levels nest.
    Returns ``{level: (lower, upper)}``, each ``n x V_y``.
    """
    for lv in levels:
        if not 0 < lv < 1:
            raise InvalidInput(f"level must lie in (0, 1), got {lv}")
    rng = rng if rng is not None else make_rng(0)
    Xin = model.inputs(predictors, covariates)
    means, lams = ensemble_predict(model.ensemble, Xin)  # S x n x K, S x K
    S, n, K = means.shape
    R = draws_per_particle
    psi = model.y_basis.psi
    center = model.y_basis.centering
    V = psi.shape[0]
    out = {lv: (np.empty((n, V)), np.empty((n, V))) for lv in levels}
    probs = sorted({p for lv in levels for p in ((1 - lv) / 2, (1 + lv) / 2)})
    sd_y = np.sqrt(lams)[:, None, :]  # S x 1 x K
    sd_vox = np.sqrt(max(model.y_sigma2, 0.0))
    for i in range(n):
        coefs = means[:, i, None, :] + sd_y * rng.standard_normal((S, R, K))
        imgs = coefs.reshape(S * R, K) @ psi.T
        if center is not None:
            imgs += center
        if sd_vox > 0:
            imgs += sd_vox * rng.standard_normal(imgs.shape)
        qs = dict(zip(probs, np.quantile(imgs, probs, axis=0)))
        for lv in levels:
            out[lv][0][i] = qs[(1 - lv) / 2]
            out[lv][1][i] = qs[(1 + lv) / 2]
    return out


def predict_interval(model: FittedModel, predictors, covariates=None, level: float = 0.95,
                     draws_per_particle: int = 20, rng=None):
    return predict_intervals(model, predictors, covariates, (level,), draws_per_particle, rng)[level]
