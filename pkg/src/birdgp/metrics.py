"""Prediction metrics and their CSV / PGM emitters."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInput, InvalidInput, ShapeError
from .numerics import quantile

MASK_MODES = ("row", "column", "union", "global")


def activated_region(observed, predicted, q: float = 0.05) -> np.ndarray:
    """Voxels in the top ``q`` fraction of |intensity| in both maps (linear-interpolated thresholds)."""
    obs = np.abs(np.asarray(observed, dtype=np.float64))
    pred = np.abs(np.asarray(predicted, dtype=np.float64))
    if obs.shape != pred.shape or obs.ndim != 1:
        raise ShapeError("observed and predicted must be vectors of equal length")
    if not 0 < q < 1:
        raise InvalidInput(f"q must lie in (0, 1), got {q}")
    if np.ptp(obs) == 0 or np.ptp(pred) == 0:
        raise DegenerateInput("constant image has no activated region")
    return (obs >= quantile(obs, 1 - q)) & (pred >= quantile(pred, 1 - q))


def _row_correlations(a, B):
    """Pearson correlation of vector ``a`` with every row of ``B``; NaN where undefined."""
    a = a - a.mean()
    B = B - B.mean(axis=1, keepdims=True)
    na = np.sqrt(a @ a)
    nb = np.sqrt(np.einsum("ij,ij->i", B, B))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (B @ a) / (na * nb)
    c[~np.isfinite(c)] = np.nan
    return np.clip(c, -1.0, 1.0)


@dataclass
class CorrelationMatrix:
    C: np.ndarray  # NaN marks a degenerate entry
    mode: str
    q: float
    region_sizes: np.ndarray | None = None
    ids: list | None = None

    @property
    def n_degenerate(self) -> int:
        return int(np.isnan(self.C).sum())

    def to_csv(self, path) -> None:
        ids = self.ids or list(range(self.C.shape[0]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject"] + [str(i) for i in ids])
            for i, row in zip(ids, self.C):
                w.writerow([i] + ["nan" if np.isnan(v) else repr(float(v)) for v in row])


def correlation_matrix(predictions, observations, mode: str = "row", q: float = 0.05, ids=None) -> CorrelationMatrix:
    """``C[i, j]`` correlates prediction ``i`` with observation ``j`` over a voxel mask.

    ``mode`` picks the mask: the activated region of subject ``i`` ("row"), of
    subject ``j`` ("column"), their union, or every voxel ("global").
    """
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    O = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if P.shape != O.shape:
        raise ShapeError(f"predictions {P.shape} vs observations {O.shape}")
    if mode not in MASK_MODES:
        raise InvalidInput(f"mode must be one of {MASK_MODES}")
    n = P.shape[0]
    C = np.full((n, n), np.nan)
    if mode == "global":
        for i in range(n):
            C[i] = _row_correlations(P[i], O)
        return CorrelationMatrix(C, mode, q, None, ids)

    masks = []
    for i in range(n):
        try:
            masks.append(activated_region(O[i], P[i], q))
        except DegenerateInput:
            masks.append(None)
    sizes = np.array([0 if m is None else int(m.sum()) for m in masks])
    if mode == "row":
        for i, m in enumerate(masks):
            if m is not None and m.sum() >= 2:
                C[i] = _row_correlations(P[i, m], O[:, m])
    elif mode == "column":
        for j, m in enumerate(masks):
            if m is not None and m.sum() >= 2:
                C[:, j] = _row_correlations(O[j, m], P[:, m])
    else:
        for i in range(n):
            for j in range(n):
                if masks[i] is None or masks[j] is None:
                    continue
                m = masks[i] | masks[j]
                if m.sum() >= 2:
                    C[i, j] = _row_correlations(P[i, m], O[j : j + 1, m])[0]
    return CorrelationMatrix(C, mode, q, sizes, ids)


@dataclass
class AccuracyCurve:
    a: np.ndarray  # per-subject accuracy, NaN when the diagonal entry is degenerate
    alphas: np.ndarray
    p: np.ndarray

    def to_csv(self, a_path=None, p_path=None) -> None:
        if a_path is not None:
            with open(a_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["subject", "accuracy"])
                for i, v in enumerate(self.a):
                    w.writerow([i, "nan" if np.isnan(v) else repr(float(v))])
        if p_path is not None:
            with open(p_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["alpha", "proportion"])
                for al, p in zip(self.alphas, self.p):
                    w.writerow([repr(float(al)), repr(float(p))])


def accuracy_and_proportion(C, alphas=None) -> AccuracyCurve:
    """``a_i`` = share of other subjects ``j`` with ``C[i,i] > C[i,j]``; ``p(alpha)`` = share of ``a_i > alpha``.

    NaN entries are dropped from both counts and their denominators.
    """
    C = C.C if isinstance(C, CorrelationMatrix) else np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    if C.shape != (n, n) or n < 2:
        raise ShapeError("need a square matrix with n >= 2")
    if alphas is None:
        alphas = np.linspace(0.0, 1.0, 101)
    alphas = np.asarray(alphas, dtype=np.float64)
    a = np.full(n, np.nan)
    off = ~np.eye(n, dtype=bool)
    for i in range(n):
        if np.isnan(C[i, i]):
            continue
        others = C[i, off[i]]
        others = others[~np.isnan(others)]
        if others.size:
            a[i] = np.count_nonzero(C[i, i] > others) / others.size
    valid = a[~np.isnan(a)]
    if valid.size == 0:
        p = np.full(alphas.shape, np.nan)
    else:
        p = (valid[None, :] > alphas[:, None]).mean(axis=1)
    return AccuracyCurve(a, alphas, p)


def mse(predictions, observations, labels=None):
    """Overall mean squared error and, when ``labels`` is given, a per-label dict."""
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    O = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if P.shape != O.shape:
        raise ShapeError(f"predictions {P.shape} vs observations {O.shape}")
    per_image = np.mean((P - O) ** 2, axis=1)
    overall = float(per_image.mean())
    if labels is None:
        return overall, {}
    labels = np.asarray(labels)
    return overall, {lab.item(): float(per_image[labels == lab].mean()) for lab in np.unique(labels)}


def coverage_rate(lower, upper, observations):
    """Mean share of voxels inside their interval: overall and per image."""
    lo, hi, O = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (lower, upper, observations))
    if not lo.shape == hi.shape == O.shape:
        raise ShapeError("interval bounds and observations must align")
    per_image = np.mean((O >= lo) & (O <= hi), axis=1)
    return float(per_image.mean()), per_image


def subject_order(curve: AccuracyCurve, region_sizes=None, min_region: int = 0) -> np.ndarray:
    """Subjects sorted by accuracy (descending), optionally keeping only large activated regions."""
    idx = np.flatnonzero(~np.isnan(curve.a))
    if region_sizes is not None and min_region > 0:
        idx = idx[np.asarray(region_sizes)[idx] > min_region]
    return idx[np.argsort(-curve.a[idx], kind="stable")]


def write_pgm(path, image, lo=None, hi=None) -> None:
    """8-bit binary PGM with linear scaling ``[lo, hi] -> [0, 255]``; a ``.txt`` sidecar records the scale."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("PGM needs a 2-D array")
    lo = float(np.nanmin(img)) if lo is None else float(lo)
    hi = float(np.nanmax(img)) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    pix = np.clip(np.round((np.nan_to_num(img, nan=lo) - lo) / span * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    path.with_suffix(path.suffix + ".txt").write_text(f"lo = {lo!r}\nhi = {hi!r}\nwidth = {img.shape[1]}\nheight = {img.shape[0]}\n")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if fields[0] != "P5":
        raise InvalidInput("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
