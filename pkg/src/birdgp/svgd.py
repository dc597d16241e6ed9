"""Stein variational gradient descent for the Bayesian network linking projected images.

Each particle is a flat vector ``theta`` laid out as::

    [ network weights and biases | log sigma2_w | log lambda_y (K_y) ]

Likelihood ``y | x ~ N(net(x), diag(lambda_y))``; all network parameters share
the prior ``N(0, sigma2_w)``; ``sigma2_w ~ IG(a_w, b_w)`` and
``lambda_y,k ~ IG(a_lambda, b_lambda)``. Variances are sampled on the log
scale, so the log densities below include the log-Jacobian.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, NumericalFailure, ShapeError
from .mlp import AdamState, MlpArch, MlpParams, adam_step, forward, grad_params, init_params
from .numerics import read_tensor, write_tensor

BANDWIDTH_FLOOR = 1e-8
BANDWIDTH_RULES = ("median_sq", "median")
WEIGHT_INITS = ("fan_in", "prior")


@dataclass(frozen=True)
class SvgdConfig:
    n_particles: int = 20
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    a_w: float = 1.0
    b_w: float = 10.0
    a_lambda: float = 1.0
    b_lambda: float = 1.0
    bandwidth_rule: str = "median_sq"
    rescale_likelihood: bool = True
    weight_init: str = "fan_in"

    def __post_init__(self):
        if self.n_particles < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("n_particles, epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise InvalidConfig("lr must be positive")
        if min(self.a_w, self.b_w, self.a_lambda, self.b_lambda) <= 0:
            raise InvalidConfig("inverse-gamma hyperparameters must be positive")
        if self.bandwidth_rule not in BANDWIDTH_RULES:
            raise InvalidConfig(f"bandwidth_rule must be one of {BANDWIDTH_RULES}")
        if self.weight_init not in WEIGHT_INITS:
            raise InvalidConfig(f"weight_init must be one of {WEIGHT_INITS}")


@dataclass(frozen=True)
class ThetaLayout:
    arch: MlpArch
    k_y: int

    def __post_init__(self):
        if self.arch.layer_sizes[-1] != self.k_y:
            raise ShapeError(f"network output width {self.arch.layer_sizes[-1]} != K_y {self.k_y}")

    @property
    def n_net(self) -> int:
        return self.arch.n_params

    @property
    def size(self) -> int:
        return self.n_net + 1 + self.k_y

    @property
    def log_sigma2_w(self) -> int:
        return self.n_net

    @property
    def log_lambda(self) -> slice:
        return slice(self.n_net + 1, self.size)

    def params(self, theta) -> MlpParams:
        return MlpParams.unflatten(self.arch, theta[: self.n_net])


@dataclass
class ParticleEnsemble:
    layout: ThetaLayout
    particles: np.ndarray  # S x D
    config: SvgdConfig = field(default_factory=SvgdConfig)

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if self.particles.shape[1] != self.layout.size:
            raise ShapeError(f"particle length {self.particles.shape[1]} != layout size {self.layout.size}")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def arch(self) -> MlpArch:
        return self.layout.arch

    def params(self, s: int) -> MlpParams:
        return self.layout.params(self.particles[s])

    @property
    def lambdas(self) -> np.ndarray:
        return np.exp(self.particles[:, self.layout.log_lambda])

    @property
    def sigma2_w(self) -> np.ndarray:
        return np.exp(self.particles[:, self.layout.log_sigma2_w])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "particles.f64", self.particles)
        sizes = ",".join(str(s) for s in self.arch.layer_sizes)
        lines = [f"layer_sizes = {sizes}", f"activation = {self.arch.activation}", f"k_y = {self.layout.k_y}"]
        lines += [f"{k} = {v}" for k, v in asdict(self.config).items()]
        (d / "ensemble.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "ParticleEnsemble":
        d = Path(directory)
        kv = {}
        for line in (d / "ensemble.txt").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        arch = MlpArch(tuple(int(s) for s in kv.pop("layer_sizes").split(",")), kv.pop("activation"))
        layout = ThetaLayout(arch, int(kv.pop("k_y")))
        cfg = _config_from_strings(kv)
        return cls(layout, read_tensor(d / "particles.f64"), cfg)


def _config_from_strings(kv: dict) -> SvgdConfig:
    types = {f: type(v) for f, v in asdict(SvgdConfig()).items()}
    out = {}
    for k, v in kv.items():
        t = types[k]
        out[k] = (v == "True") if t is bool else t(v)
    return SvgdConfig(**out)


def init_ensemble(arch: MlpArch, k_y: int, cfg: SvgdConfig, rng, lambda_init=None) -> ParticleEnsemble:
    """Draw the starting particles.

    ``sigma2_w`` always comes from its IG prior. With ``weight_init="prior"``
    the network parameters are ``N(0, sigma2_w)``; with ``"fan_in"`` they use
    fan-in scaled normal draws and zero biases, which keeps deep or wide
    networks out of saturation at the start. ``lambda_init`` (length K_y)
    replaces the IG prior draw for ``lambda_y`` when supplied.
    """
    layout = ThetaLayout(arch, k_y)
    S = cfg.n_particles
    thetas = np.empty((S, layout.size))
    for s in range(S):
        sigma2_w = cfg.b_w / rng.standard_gamma(cfg.a_w)
        if cfg.weight_init == "prior":
            net = rng.normal(0.0, np.sqrt(sigma2_w), size=layout.n_net)
        else:
            net = init_params(arch, rng).flatten()
        if lambda_init is None:
            lam = cfg.b_lambda / rng.standard_gamma(cfg.a_lambda, size=k_y)
        else:
            lam = np.broadcast_to(np.asarray(lambda_init, dtype=np.float64), (k_y,))
        thetas[s, : layout.n_net] = net
        thetas[s, layout.log_sigma2_w] = np.log(sigma2_w)
        thetas[s, layout.log_lambda] = np.log(lam)
    return ParticleEnsemble(layout, thetas, cfg)


def log_post_grad(theta, layout: ThetaLayout, X, Y, n_total: int, cfg: SvgdConfig):
    """Minibatch log posterior (up to a constant) and its gradient in ``theta``.

    The likelihood is multiplied by ``n_total / len(X)`` when
    ``cfg.rescale_likelihood`` is set.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0 or X.shape[0] != Y.shape[0]:
        raise ShapeError("batch must be nonempty with matching x and y counts")
    if Y.shape[1] != layout.k_y:
        raise ShapeError(f"y width {Y.shape[1]} != K_y {layout.k_y}")
    theta = np.asarray(theta, dtype=np.float64)
    scale = n_total / X.shape[0] if cfg.rescale_likelihood else 1.0
    w = theta[: layout.n_net]
    omega = theta[layout.log_sigma2_w]
    ell = theta[layout.log_lambda]
    lam = np.exp(ell)
    params = MlpParams.unflatten(layout.arch, w)

    F, cache = forward(params, X, return_cache=True)
    R = Y - F
    r2 = np.einsum("ik,ik->k", R, R)
    m = X.shape[0]
    loglik = scale * np.sum(-0.5 * m * ell - 0.5 * r2 / lam)
    ww = float(w @ w)
    sigma2_w = np.exp(omega)
    P = layout.n_net
    logprior = -0.5 * P * omega - 0.5 * ww / sigma2_w
    loghyper = -cfg.a_w * omega - cfg.b_w * np.exp(-omega)
    loghyper += np.sum(-cfg.a_lambda * ell - cfg.b_lambda * np.exp(-ell))

    grad = np.empty_like(theta)
    grad[:P] = grad_params(params, X, scale * R / lam, cache) - w / sigma2_w
    grad[layout.log_sigma2_w] = -0.5 * P + 0.5 * ww / sigma2_w - cfg.a_w + cfg.b_w * np.exp(-omega)
    grad[layout.log_lambda] = scale * (-0.5 * m + 0.5 * r2 / lam) - cfg.a_lambda + cfg.b_lambda * np.exp(-ell)
    return float(loglik + logprior + loghyper), grad


def bandwidth(particles, rule: str = "median_sq") -> float:
    """Median-heuristic bandwidth over distinct particle pairs, floored."""
    S = particles.shape[0]
    if S < 2:
        return 1.0
    sq = _pairwise_sq(particles)
    med = float(np.median(np.sqrt(sq[np.triu_indices(S, 1)])))
    h = (med * med if rule == "median_sq" else med) / np.log(S + 1.0)
    return max(h, BANDWIDTH_FLOOR)


def _pairwise_sq(particles):
    norms = np.einsum("ij,ij->i", particles, particles)
    sq = norms[:, None] + norms[None, :] - 2.0 * particles @ particles.T
    np.fill_diagonal(sq, 0.0)
    return np.maximum(sq, 0.0)


def rbf_kernel(particles, rule: str = "median_sq"):
    """Kernel matrix, summed kernel gradients, and bandwidth.

    ``repulsion[s] = sum_{s'} grad_{theta_s'} k(theta_s', theta_s)
    = (2/h) sum_{s'} (theta_s - theta_s') k(theta_s', theta_s)``.
    """
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    h = bandwidth(particles, rule)
    K = np.exp(-_pairwise_sq(particles) / h)
    repulsion = (2.0 / h) * (particles * K.sum(axis=1, keepdims=True) - K @ particles)
    return K, repulsion, h


def svgd_direction(particles, grads, rule: str = "median_sq"):
    """Stein direction ``phi`` for every particle, plus the bandwidth used."""
    K, repulsion, h = rbf_kernel(particles, rule)
    S = particles.shape[0]
    return (K @ grads + repulsion) / S, h


def svgd_step(particles, grads, state: AdamState, rule: str = "median_sq"):
    """One Adam ascent step along the Stein direction; returns (particles, state, h)."""
    phi, h = svgd_direction(particles, grads, rule)
    state, new = adam_step(state, particles, -phi)
    return new, state, h


def _check_particle_grads(G, epoch):
    bad = ~np.isfinite(G)
    if np.any(bad):
        s = int(np.flatnonzero(bad.any(axis=1))[0])
        raise NumericalFailure(f"non-finite log-posterior gradient for particle {s} at epoch {epoch}",
                               index=s, epoch=epoch)


@dataclass
class SvgdTrace:
    epoch: list = field(default_factory=list)
    mean_log_post: list = field(default_factory=list)
    bandwidth: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_log_posterior", "bandwidth"])
            for row in zip(self.epoch, self.mean_log_post, self.bandwidth):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def svgd_fit(X, Y, ensemble: ParticleEnsemble, cfg: SvgdConfig | None, rng, callback=None):
    """Train the ensemble on projected pairs ``(X, Y)`` for ``cfg.epochs`` passes.

    Each epoch visits a fresh random permutation of the data in minibatches.
    The trace records the full-data log posterior averaged over particles and
    the bandwidth of the last step of each epoch.
    """
    cfg = cfg or ensemble.config
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    n = X.shape[0]
    if n == 0 or Y.shape[0] != n:
        raise ShapeError("need matching, nonempty x and y")
    if X.shape[1] != ensemble.arch.layer_sizes[0]:
        raise ShapeError(f"x width {X.shape[1]} != network input {ensemble.arch.layer_sizes[0]}")
    if cfg.batch_size > n:
        raise InvalidConfig(f"batch_size {cfg.batch_size} exceeds n = {n}")
    layout = ensemble.layout
    thetas = ensemble.particles.copy()
    S = thetas.shape[0]
    state = AdamState(lr=cfg.lr)
    trace = SvgdTrace()
    grads = np.empty_like(thetas)
    h = 1.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            for s in range(S):
                _, grads[s] = log_post_grad(thetas[s], layout, X[idx], Y[idx], n, cfg)
            _check_particle_grads(grads, epoch)
            thetas, state, h = svgd_step(thetas, grads, state, cfg.bandwidth_rule)
        values = [log_post_grad(thetas[s], layout, X, Y, n, cfg)[0] for s in range(S)]
        trace.epoch.append(epoch + 1)
        trace.mean_log_post.append(float(np.mean(values)))
        trace.bandwidth.append(h)
        if callback is not None:
            callback(epoch, thetas, trace)
    return ParticleEnsemble(layout, thetas, cfg), trace


def ensemble_predict(ensemble: ParticleEnsemble, X):
    """Per-particle network outputs (S x n x K_y) and noise eigenvalues (S x K_y)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != ensemble.arch.layer_sizes[0]:
        raise ShapeError(f"x width {X.shape[1]} != network input {ensemble.arch.layer_sizes[0]}")
    means = np.stack([forward(ensemble.params(s), X) for s in range(ensemble.n_particles)])
    return means, ensemble.lambdas


def linear_ensemble(B, lam, bias=None) -> ParticleEnsemble:
    """Single-particle ensemble for ``y | x ~ N(B x + bias, diag(lam))`` (oracle checks)."""
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    k_y, k_x = B.shape
    layout = ThetaLayout(MlpArch((k_x, k_y)), k_y)
    theta = np.zeros(layout.size)
    theta[: k_y * k_x] = B.ravel()
    if bias is not None:
        theta[k_y * k_x : layout.n_net] = bias
    theta[layout.log_lambda] = np.log(np.broadcast_to(np.asarray(lam, dtype=np.float64), (k_y,)))
    return ParticleEnsemble(layout, theta[None, :], SvgdConfig(n_particles=1))
