"""Dense linear-algebra kernels, random variates, descriptive statistics and
the raw-tensor file format.

All arrays are float64. Random streams come from :func:`make_rng`, which keys a
PCG64 generator on ``(seed, stream)`` so independent streams can be handed to
per-image or per-replicate work without coordination.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import DegenerateCorrelation, FormatError, InvalidInput, NumericalFailure, RankDeficient

__all__ = [
    "make_rng",
    "svd_thin",
    "gram_schmidt",
    "sample_normal",
    "sample_inverse_gamma",
    "pearson",
    "quantile",
    "write_tensor",
    "read_tensor",
]

MAX_JACOBI_SWEEPS = 60


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for ``(seed, stream)``; equal keys replay identically."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream) & (2**64 - 1),))
    return np.random.Generator(np.random.PCG64(ss))


def _as_finite_matrix(M, name="matrix"):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return M


def _round_robin(k):
    """Tournament schedule: k-1 rounds (k even) of k/2 disjoint index pairs."""
    players = list(range(k))
    if k % 2:
        players.append(-1)
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def svd_thin(M, tol: float = 1e-15, max_sweeps: int = MAX_JACOBI_SWEEPS):
    """Thin SVD of a tall matrix by one-sided (Hestenes) Jacobi rotations.

    Returns ``U (V x K)``, ``s (K,)`` non-increasing and ``Vt (K x K)`` with
    ``M = U @ diag(s) @ Vt``. Disjoint column pairs of each round-robin step are
    rotated together, so one sweep costs K-1 vectorised passes over ``M``.
    Tall inputs (rows >= 2 cols) are first reduced by Householder QR and the
    rotations run on the K x K triangular factor.
    """
    A = _as_finite_matrix(M).copy()
    n_rows, k = A.shape
    if n_rows < k:
        raise InvalidInput(f"svd_thin needs rows >= cols, got {A.shape}")
    if k and n_rows >= 2 * k:
        Q, R = np.linalg.qr(A)
        U, sv, Vt = svd_thin(R, tol=tol, max_sweeps=max_sweeps)
        return Q @ U, sv, Vt
    W = np.eye(k)
    if k > 1:
        rounds = _round_robin(k)
        # columns below this squared norm count as zero and are not rotated
        floor = (tol * np.linalg.norm(A, axis=0).max()) ** 2
        for sweep in range(max_sweeps):
            rotated = False
            for p, q in rounds:
                ap, aq = A[:, p], A[:, q]
                alpha = np.einsum("ij,ij->j", ap, ap)
                beta = np.einsum("ij,ij->j", aq, aq)
                gamma = np.einsum("ij,ij->j", ap, aq)
                active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > floor)
                if not np.any(active):
                    continue
                rotated = True
                p, q = p[active], q[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t[zeta == 0] = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = A[:, p], A[:, q]
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                wp, wq = W[:, p], W[:, q]
                W[:, p] = c * wp - s * wq
                W[:, q] = s * wp + c * wq
            if not rotated:
                break
        else:
            raise NumericalFailure(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")
    sv = np.linalg.norm(A, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, A, W = sv[order], A[:, order], W[:, order]
    U = np.zeros_like(A)
    smax = sv[0] if k else 0.0
    # near-null columns are not reliably orthogonal after normalisation; rebuild them
    live = sv > smax * 1e-13 if smax > 0 else np.zeros(k, bool)
    U[:, live] = A[:, live] / sv[live]
    if not np.all(live):
        U = _complete_orthonormal(U, live)
    return U, sv, W.T


def _complete_orthonormal(U, live):
    """Fill zero columns of U with unit vectors orthogonal to the live columns."""
    n_rows = U.shape[0]
    basis = [U[:, j] for j in np.flatnonzero(live)]
    for j in np.flatnonzero(~live):
        for e in range(n_rows):
            v = np.zeros(n_rows)
            v[e] = 1.0
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        U[:, j] = v
        basis.append(v)
    return U


def gram_schmidt(columns, rank_tol: float = 1e-10):
    """Modified Gram-Schmidt with one re-orthogonalisation pass.

    Raises :class:`RankDeficient` (``index`` = offending column) when a column's
    norm after projection falls below ``rank_tol`` times the largest input norm.
    """
    A = _as_finite_matrix(columns, "columns")
    Q = A.copy()
    norms = np.linalg.norm(A, axis=0)
    cutoff = rank_tol * (norms.max() if norms.size else 0.0)
    for j in range(Q.shape[1]):
        v = Q[:, j]
        for _ in range(2):
            if j:
                v = v - Q[:, :j] @ (Q[:, :j].T @ v)
        nv = np.linalg.norm(v)
        if nv <= cutoff or nv == 0.0:
            raise RankDeficient(f"column {j} is linearly dependent on earlier columns", index=j)
        Q[:, j] = v / nv
    return Q


def sample_normal(mean: float, sd: float, rng: np.random.Generator, size=None):
    if not sd > 0:
        raise InvalidInput(f"sd must be positive, got {sd}")
    return rng.normal(mean, sd, size=size)


def sample_inverse_gamma(a, b, rng: np.random.Generator, size=None):
    """Draw from IG(a, b) with density proportional to x^(-a-1) exp(-b/x)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise InvalidInput("inverse-gamma shape and scale must be positive")
    out = b / rng.standard_gamma(a, size=size)
    return float(out) if np.ndim(out) == 0 else out


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise InvalidInput("pearson needs two equal-length vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(da @ da)
    nb = np.sqrt(db @ db)
    if na == 0 or nb == 0:
        raise DegenerateCorrelation("zero variance in correlation argument")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def quantile(v, q):
    """Linear interpolation between the closest order statistics."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidInput("quantile of empty vector")
    if np.any((np.asarray(q) < 0) | (np.asarray(q) > 1)):
        raise InvalidInput("quantile level outside [0, 1]")
    return np.quantile(v, q, method="linear")


# raw tensor persistence ------------------------------------------------------


def write_tensor(path, array) -> None:
    """``dtype=f64 shape=AxB...`` header line, then little-endian float64 payload."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    shape = "x".join(str(d) for d in arr.shape) if arr.ndim else ""
    with open(path, "wb") as fh:
        fh.write(f"dtype=f64 shape={shape}\n".encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        fields = dict(tok.split("=", 1) for tok in header.decode("ascii").split())
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"{os.fspath(path)}: malformed tensor header", offset=0) from None
    if fields.get("dtype") != "f64" or "shape" not in fields:
        raise FormatError(f"{os.fspath(path)}: unsupported tensor header {header!r}", offset=0)
    shape = tuple(int(d) for d in fields["shape"].split("x")) if fields["shape"] else ()
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise FormatError(
            f"{os.fspath(path)}: payload has {len(payload)} bytes, expected {expected}",
            offset=len(header) + min(len(payload), expected),
        )
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

