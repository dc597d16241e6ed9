"""Feed-forward networks with hand-written reverse-mode gradients, and Adam.

Flat parameter order is layer-major: ``W_1`` (row-major), ``b_1``, ``W_2``, ...
Hidden layers use the configured activation, the output layer is linear.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, InvalidState, NumericalFailure, ShapeError
from .numerics import read_tensor, write_tensor

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpArch:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidInput(f"need at least input and output sizes >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInput(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def shapes(self):
        s = self.layer_sizes
        return [((s[i + 1], s[i]), (s[i + 1],)) for i in range(len(s) - 1)]


@dataclass
class MlpParams:
    arch: MlpArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        for (ws, bs), W, b in zip(self.arch.shapes(), self.weights, self.biases):
            if W.shape != ws or b.shape != bs:
                raise ShapeError(f"parameter shapes {W.shape}/{b.shape} do not match {ws}/{bs}")

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, arch: MlpArch, flat) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.n_params,):
            raise ShapeError(f"flat vector has shape {flat.shape}, arch needs ({arch.n_params},)")
        weights, biases, pos = [], [], 0
        for ws, bs in arch.shapes():
            nw = ws[0] * ws[1]
            weights.append(flat[pos:pos + nw].reshape(ws).copy())
            pos += nw
            biases.append(flat[pos:pos + bs[0]].copy())
            pos += bs[0]
        return cls(arch, weights, biases)

    @classmethod
    def zeros(cls, arch: MlpArch) -> "MlpParams":
        return cls.unflatten(arch, np.zeros(arch.n_params))

    def save(self, directory) -> None:
        """One raw-tensor file per weight and bias, plus a plain-text arch manifest."""
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        sizes = ",".join(str(s) for s in self.arch.layer_sizes)
        (d / "arch.txt").write_text(f"layer_sizes = {sizes}\nactivation = {self.arch.activation}\n")
        for i, (W, b) in enumerate(zip(self.weights, self.biases), start=1):
            write_tensor(d / f"W{i}.f64", W)
            write_tensor(d / f"b{i}.f64", b)

    @classmethod
    def load(cls, directory) -> "MlpParams":
        from pathlib import Path

        d = Path(directory)
        manifest = dict(
            (k.strip(), v.strip())
            for k, v in (line.split("=", 1) for line in (d / "arch.txt").read_text().splitlines() if "=" in line)
        )
        arch = MlpArch(tuple(int(s) for s in manifest["layer_sizes"].split(",")), manifest["activation"])
        weights = [read_tensor(d / f"W{i}.f64") for i in range(1, arch.n_layers + 1)]
        biases = [read_tensor(d / f"b{i}.f64") for i in range(1, arch.n_layers + 1)]
        return cls(arch, weights, biases)


def init_params(arch: MlpArch, rng: np.random.Generator) -> MlpParams:
    """He-normal weights for relu, Xavier-normal for tanh; zero biases."""
    weights, biases = [], []
    for (out_dim, in_dim), _ in arch.shapes():
        if arch.activation == "relu":
            var = 2.0 / in_dim
        else:
            var = 2.0 / (in_dim + out_dim)
        weights.append(rng.normal(0.0, np.sqrt(var), size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return MlpParams(arch, weights, biases)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    fingerprint: np.ndarray = field(repr=False)


def _check_input(params: MlpParams, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.arch.layer_sizes[0]:
        raise ShapeError(f"input width {X.shape[-1]} != arch input {params.arch.layer_sizes[0]}")
    return X


def forward(params: MlpParams, X, return_cache: bool = False):
    """Batched forward pass. ``X`` is ``B x S_0``; returns ``B x S_L``."""
    X = _check_input(params, X)
    relu = params.arch.activation == "relu"
    a = X
    zs, acts = [], [X]
    L = params.arch.n_layers
    for ell, (W, b) in enumerate(zip(params.weights, params.biases), start=1):
        z = a @ W.T + b
        zs.append(z)
        if ell < L:
            a = np.maximum(z, 0.0) if relu else np.tanh(z)
        else:
            a = z
        acts.append(a)
    if return_cache:
        return a, ForwardCache(X, zs, acts, params.flatten())
    return a


def backward(params: MlpParams, cache: ForwardCache, G):
    """Vector-Jacobian product of ``<G, forward(X)>``.

    Returns ``(grad_flat, grad_X)``: parameter gradient summed over the batch
    and the per-row input gradient.
    """
    if cache.fingerprint.shape != (params.arch.n_params,) or not np.array_equal(
        cache.fingerprint, params.flatten()
    ):
        raise InvalidState("forward cache was computed with different parameters")
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    out = cache.activations[-1]
    if G.shape != out.shape:
        raise ShapeError(f"cotangent shape {G.shape} != output shape {out.shape}")
    relu = params.arch.activation == "relu"
    L = params.arch.n_layers
    gW = [None] * L
    gb = [None] * L
    delta = G
    for ell in range(L, 0, -1):
        a_prev = cache.activations[ell - 1]
        gW[ell - 1] = delta.T @ a_prev
        gb[ell - 1] = delta.sum(axis=0)
        delta = delta @ params.weights[ell - 1]
        if ell > 1:
            z = cache.pre_activations[ell - 2]
            if relu:
                delta = delta * (z > 0.0)  # derivative at exactly 0 is 0
            else:
                t = cache.activations[ell - 1]
                delta = delta * (1.0 - t * t)
    parts = []
    for W, b in zip(gW, gb):
        parts.append(W.ravel())
        parts.append(b)
    return np.concatenate(parts), delta


def grad_params(params: MlpParams, X, G, cache: ForwardCache | None = None) -> np.ndarray:
    if cache is None:
        _, cache = forward(params, X, return_cache=True)
    return backward(params, cache, G)[0]


def grad_input(params: MlpParams, X, G, cache: ForwardCache | None = None) -> np.ndarray:
    if cache is None:
        _, cache = forward(params, X, return_cache=True)
    return backward(params, cache, G)[1]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    max_norm: float | None = None


def adam_step(state: AdamState, params_flat, grad_flat):
    """One bias-corrected Adam descent step. Works on any array shape.

    Mutates and returns ``state``; returns a new parameter array.
    """
    params_flat = np.asarray(params_flat, dtype=np.float64)
    g = np.asarray(grad_flat, dtype=np.float64)
    if g.shape != params_flat.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {params_flat.shape}")
    bad = ~np.isfinite(g)
    if np.any(bad):
        idx = np.unravel_index(int(np.flatnonzero(bad.ravel())[0]), g.shape)
        raise NumericalFailure(f"non-finite gradient at index {idx}", index=idx)
    if state.max_norm is not None:
        norm = np.linalg.norm(g)
        if norm > state.max_norm:
            g = g * (state.max_norm / norm)
    if state.m is None:
        state.m = np.zeros_like(params_flat)
        state.v = np.zeros_like(params_flat)
    if state.m.shape != params_flat.shape:
        raise ShapeError("Adam moments do not match parameter shape")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return state, params_flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
