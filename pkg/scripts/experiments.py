"""Desk-scale experiment harness shared by the runner scripts and the acceptance suite."""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from birdgp.basis import BasisNetConfig, VoxelGrid, learn_basis, variance_explained
from birdgp.data import (
    ScenarioSpec,
    baseline_vr,
    generating_basis,
    load_idx,
    make_mnist_arithmetic,
    make_quartile_split,
    simulate_scenario,
    substitute_classifier,
)
from birdgp.importance import importance_measure, linear_oracle_im
from birdgp.metrics import accuracy_and_proportion, correlation_matrix, coverage_rate, mse
from birdgp.numerics import make_rng
from birdgp.pipeline import PipelineConfig, fit_model, predict_interval, predict_mean
from birdgp.projection import gibbs_project

GRID_SIDE = 32
GEN_KERNEL = "matern"
GEN_LENGTH_SCALE = 0.2

IDX_NAMES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def find_idx(directory) -> dict:
    """Locate the four standard IDX files (optionally gzipped) in ``directory``."""
    d = Path(directory)
    found = {}
    for key, stems in IDX_NAMES.items():
        for stem in stems:
            for suffix in ("", ".gz"):
                if (d / f"{stem}{suffix}").exists():
                    found[key] = d / f"{stem}{suffix}"
        if key not in found:
            raise FileNotFoundError(f"{d} has no {stems[0]}[.gz]")
    return found


def load_splits(directory):
    f = find_idx(directory)
    Xtr, _, ltr = load_idx(f["train_images"], f["train_labels"])
    Xte, _, lte = load_idx(f["test_images"], f["test_labels"])
    return (Xtr, ltr), (Xte, lte)


# ---------------------------------------------------------------- scenarios

def scenario_data(scenario: int, seed: int = 0, n: int = 714, n_test: int = 714, K: int = 50):
    grid = VoxelGrid.regular(GRID_SIDE, GRID_SIDE)
    bx = generating_basis(grid, GEN_KERNEL, GEN_LENGTH_SCALE, K)
    by = bx if scenario == 3 else generating_basis(grid, GEN_KERNEL, GEN_LENGTH_SCALE, K)
    train, test, truth = simulate_scenario(ScenarioSpec(scenario, n=n, k_x=K, k_y=K), bx, by,
                                           make_rng(seed, 10), n_test=n_test)
    return train, test, truth, bx, by


def accuracy_curve(pred, obs):
    return accuracy_and_proportion(correlation_matrix(pred, obs, "row"))


def scenario_run(scenario: int, seed: int = 0, basis_method: str = "dnn", K: int = 50, n: int = 714,
                 n_test: int = 714) -> dict:
    """Fit on a simulated training set; a_i and p(alpha) on the held-out set, with VR alongside."""
    train, test, _, _, _ = scenario_data(scenario, seed, n, n_test, K)
    cfg = PipelineConfig(k_x=K, k_y=K, basis_method=basis_method, seed=seed)
    t0 = time.perf_counter()
    model = fit_model(train.predictors, train.x_grids, train.outcomes, train.y_grid, cfg)
    fit_seconds = time.perf_counter() - t0
    pred = predict_mean(model, test.predictors)
    curve = accuracy_curve(pred, test.outcomes)
    out = {
        "scenario": scenario,
        "basis": basis_method,
        "median_a": float(np.nanmedian(curve.a)),
        "curve": curve,
        "test_mse": mse(pred, test.outcomes)[0],
        "fit_seconds": fit_seconds,
        "timings": dict(model.timings),
    }
    if scenario == 3:
        vr = baseline_vr(train)
        out["vr_curve"] = accuracy_curve(vr.predict(test.predictors[0]), test.outcomes)
        out["vr_median_a"] = float(np.nanmedian(out["vr_curve"].a))
        mask = curve.alphas <= 0.9
        out["max_gap_vs_vr"] = float(np.max(np.abs(curve.p - out["vr_curve"].p)[mask]))
    return out


def scenario1_importance(seed: int = 0, K: int = 50, n: int = 714) -> dict:
    """Estimated importance vs the closed form, fitting with the generating bases.

    Stage 1 reorders columns by eigenvalue, so estimates are mapped back to the
    generating columns by maximal |overlap|.
    """
    train, _, truth, bx, by = scenario_data(1, seed, n, 0, K)
    cfg = PipelineConfig(k_x=K, k_y=K, seed=seed)
    model = fit_model(train.predictors, train.x_grids, train.outcomes, train.y_grid, cfg, x_bases=[bx], y_basis=by)
    overlap = np.abs(model.x_bases[0].psi.T @ bx.psi)
    column = overlap.argmax(axis=1)
    if np.unique(column).size != K:
        raise RuntimeError("fitted predictor columns do not map one-to-one onto the generating basis")
    im = np.empty(K)
    im[column] = importance_measure(model.ensemble, model.train_x, model.train_y).im
    oracle = linear_oracle_im(truth["B"], truth["lam"])
    return {"im": im, "oracle": oracle, "corr": float(np.corrcoef(im, oracle)[0, 1]),
            "min_overlap": float(overlap.max(axis=1).min())}


# ---------------------------------------------------------------- image datasets

def fashion_sets(directory, seed: int = 0, n: int = 1000, n_test: int = 1000):
    (Xtr, ltr), (Xte, lte) = load_splits(directory)
    rng = make_rng(seed, 1000)
    itr = np.sort(rng.choice(Xtr.shape[0], n, replace=False))
    ite = np.sort(make_rng(seed, 2000).choice(Xte.shape[0], n_test, replace=False))
    return make_quartile_split(Xtr[itr], ltr[itr]), make_quartile_split(Xte[ite], lte[ite])


def fashion_run(directory, seed: int = 0) -> dict:
    train, test = fashion_sets(directory, seed)
    model = fit_model(train.predictors, train.x_grids, train.outcomes, train.y_grid, PipelineConfig(seed=seed))
    out = {"timings": dict(model.timings)}
    for name, ds in (("train", train), ("test", test)):
        pred = predict_mean(model, ds.predictors)
        out[f"{name}_mse"], out[f"{name}_mse_by_label"] = mse(pred, ds.outcomes, ds.labels)
        lo, hi = predict_interval(model, ds.predictors, level=0.95, rng=make_rng(seed, 5))
        out[f"{name}_mcr"], per = coverage_rate(lo, hi, ds.outcomes)
        out[f"{name}_mcr_sd"] = float(per.std())
    return out


def fashion_variance_explained(directory, seed: int = 0, K: int = 100, first: int = 50) -> dict:
    """Share of image sum-of-squares captured by the ``first`` highest-eigenvalue columns of a K-column basis.

    Also returned per image stack: ``ceiling``, the best share any ``first``-column
    basis can reach (uncentred SVD), and ``eigen_share``, the top-``first``
    eigenvalues' fraction of all K eigenvalues.
    """
    train, _ = fashion_sets(directory, seed)
    out = {}
    for name, images, grid, stream in (("predictor", train.predictors[0], train.x_grids[0], 100),
                                       ("outcome", train.outcomes, train.y_grid, 1)):
        basis, _ = learn_basis(images, grid, K, BasisNetConfig(), make_rng(seed, stream))
        post = gibbs_project(images, basis, rng=make_rng(seed, stream + 1))
        s = np.linalg.svd(images, compute_uv=False)
        lam = post.basis.eigenvalues
        out[name] = variance_explained(images, post.basis, first)
        out[f"{name}_ceiling"] = float(np.sum(s[:first] ** 2) / np.sum(s**2))
        out[f"{name}_eigen_share"] = float(lam[:first].sum() / lam.sum())
    return out


def arithmetic_run(directory, replicates: int = 5, n: int = 1000, n_test: int = 1000, seed: int = 0) -> list:
    """Classification accuracy of predicted outcomes, one dict per replicate dataset."""
    (Xtr, ltr), (Xte, lte) = load_splits(directory)
    keep = np.isin(ltr, (1, 3))
    clf = substitute_classifier(Xtr[keep], ltr[keep])
    results = []
    for r in range(replicates):
        train = make_mnist_arithmetic(Xtr, ltr, n, make_rng(seed, 1000 + r))
        test = make_mnist_arithmetic(Xte, lte, n_test, make_rng(seed, 2000 + r))
        model = fit_model(train.predictors, train.x_grids, train.outcomes, train.y_grid, PipelineConfig(seed=seed + r))
        res = {"replicate": r, "classifier_train_acc": float(np.mean(clf.classify(Xtr[keep]) == ltr[keep]))}
        for name, ds in (("train", train), ("test", test)):
            res[f"{name}_acc"] = float(np.mean(clf.classify(predict_mean(model, ds.predictors)) == ds.labels))
        results.append(res)
    return results
