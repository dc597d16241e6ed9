import time
from pathlib import Path

import numpy as np
import pytest

from birdgp.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE, exit_code, main, parse_pairs, resolve_config
from birdgp.data import PairedDataset, write_idx
from birdgp.errors import InvalidConfig, NumericalFailure
from birdgp.metrics import read_pgm
from birdgp.numerics import make_rng, read_tensor, write_tensor
from birdgp.pipeline import STAGES, StageError

SIM = ["simulate", "-q", "scenario=1", "n=20", "n_test=12", "grid_rows=12", "grid_cols=12",
       "gen_k_x=6", "gen_k_y=5", "seed=11"]
FIT = ["fit", "-q", "k_x=5", "k_y=5", "basis_hidden=16,16", "basis_epochs=3", "basis_batch_voxels=48",
       "gibbs_iters=60", "gibbs_burn_in=20", "n_particles=4", "svgd_epochs=2", "batch_size=8", "bnn_hidden=8"]


def tree(d: Path, skip=("timings.csv", "manifest.txt")) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim") / "data"
    assert main(SIM + [f"output={d}"]) == 0
    return d


@pytest.fixture(scope="module")
def fit_dir(sim_dir):
    d = sim_dir.parent / "fit"
    assert main(FIT + [f"dataset={sim_dir}", f"output={d}"]) == 0
    return d


def test_config_parsing():
    cfg = resolve_config(parse_pairs(["k_x = 10,20  # two channels", "", "rescale_likelihood = false", "lr=0.01"]))
    assert cfg.k_x == (10, 20) and cfg.rescale_likelihood is False and cfg.lr == 0.01
    assert cfg.pipeline().k_x == (10, 20)
    with pytest.raises(InvalidConfig):
        resolve_config({"nonsense": "1"})
    with pytest.raises(InvalidConfig):
        resolve_config({"n": "ten"})
    with pytest.raises(InvalidConfig):
        parse_pairs(["command = fit"], "simulate")


def test_simulate_replayable(sim_dir, tmp_path):
    assert main(SIM + [f"output={tmp_path / 'again'}"]) == 0
    a, b = tree(sim_dir), tree(tmp_path / "again")
    a.pop("config.resolved.txt"), b.pop("config.resolved.txt")
    assert a == b
    assert {"train/outcomes.f64", "test/outcomes.f64", "truth/B.f64"} <= set(a)


def test_usage_errors(tmp_path):
    assert main(["simulate", "-q", "scenario=4", f"output={tmp_path}"]) == EXIT_USAGE
    assert main(["fit", "-q", "mystery=1", f"output={tmp_path}"]) == EXIT_USAGE
    assert main(["fit", "-q", "dataset=x"]) == EXIT_USAGE  # no output
    assert main(["fit", "-q", "-c", str(tmp_path / "missing.txt"), f"output={tmp_path}"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["launch"])
    assert e.value.code == 2


def test_data_and_numerical_exit_codes(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x08\x01garbage")
    (tmp_path / "lab.idx").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x00")
    args = ["simulate", "-q", "source=fashion_quartile", f"idx_train_images={tmp_path / 'bad.idx'}",
            f"idx_train_labels={tmp_path / 'lab.idx'}", "n_test=0", f"output={tmp_path / 'o'}"]
    assert main(args) == EXIT_DATA
    assert main(["predict", "-q", f"model={tmp_path}", f"dataset={tmp_path}", f"output={tmp_path / 'p'}"]) == EXIT_DATA
    assert exit_code(NumericalFailure("diverged", index=2)) == EXIT_NUMERICAL
    assert exit_code(StageError("svgd", NumericalFailure("x"))) == EXIT_NUMERICAL


def test_fit_smoke_timing_and_replay(sim_dir, fit_dir, tmp_path):
    t0 = time.perf_counter()
    assert main(FIT + ["--threads", "2", f"dataset={sim_dir}", f"output={tmp_path / 'again'}"]) == 0
    assert time.perf_counter() - t0 < 60
    rows = (fit_dir / "timings.csv").read_text().splitlines()
    assert rows[0] == "stage,seconds" and [r.split(",")[0] for r in rows[1:]] == list(STAGES)
    assert tree(fit_dir / "model") == tree(tmp_path / "again" / "model")
    # the resolved config alone replays the run
    resolved = fit_dir / "config.resolved.txt"
    assert main(["fit", "-q", "-c", str(resolved), f"output={tmp_path / 'replay'}"]) == 0
    assert tree(fit_dir / "model") == tree(tmp_path / "replay" / "model")


def test_predict_importance_evaluate(sim_dir, fit_dir, tmp_path):
    pred = tmp_path / "pred"
    assert main(["predict", "-q", f"model={fit_dir / 'model'}", f"dataset={sim_dir}", "levels=0.9,0.95",
                 f"output={pred}"]) == 0
    mean = read_tensor(pred / "mean.f64")
    assert mean.shape == (12, 144)
    lo90, lo95 = read_tensor(pred / "lower_0.9.f64"), read_tensor(pred / "lower_0.95.f64")
    assert np.all(lo95 <= lo90)
    assert main(["importance", "-q", f"model={fit_dir / 'model'}", f"output={tmp_path / 'imp'}"]) == 0
    lines = (tmp_path / "imp" / "importance.csv").read_text().splitlines()
    assert lines[0] == "dimension,importance,rank,block" and len(lines) == 6
    assert main(["evaluate", "-q", f"predictions={pred}", f"dataset={sim_dir}", f"output={tmp_path / 'ev'}"]) == 0
    cov = (tmp_path / "ev" / "coverage.csv").read_text().splitlines()
    assert cov[0].startswith("level,") and len(cov) == 3
    assert "file = mse.csv" in (tmp_path / "ev" / "manifest.txt").read_text()


def test_evaluate_identical_predictions(tmp_path):
    rng = make_rng(3)
    grid_side = 32
    from birdgp.basis import VoxelGrid

    grid = VoxelGrid.regular(grid_side, grid_side)
    Y = rng.normal(size=(6, grid.size))
    PairedDataset([Y.copy()], [grid], Y, grid).save(tmp_path / "data")
    (tmp_path / "pred").mkdir()
    write_tensor(tmp_path / "pred" / "mean.f64", Y)
    out = tmp_path / "ev"
    assert main(["evaluate", "-q", f"predictions={tmp_path / 'pred'}", f"dataset={tmp_path / 'data'}",
                 f"output={out}", "min_region=0"]) == 0
    heat = read_pgm(out / "correlation_heatmap.pgm")
    assert np.all(np.diag(heat) == 255)
    rows = (out / "proportion.csv").read_text().splitlines()[1:]
    p = {float(a): float(v) for a, v in (r.split(",") for r in rows)}
    assert all(v == 1.0 for a, v in p.items() if a < 1.0)


def test_export_basis(fit_dir, tmp_path):
    assert main(["export-basis", "-q", f"model={fit_dir / 'model'}", f"output={tmp_path / 'b'}"]) == 0
    for name in ("x_basis_0", "y_basis"):
        pgms = sorted((tmp_path / "b" / name).glob("basis_*.pgm"))
        assert len(pgms) == 5
        assert read_pgm(pgms[0]).shape == (12, 12)
    assert main(["export-basis", "-q", f"model={fit_dir / 'model'}", "order=size",
                 f"output={tmp_path / 'c'}"]) == EXIT_USAGE


def test_mnist_arithmetic_replicates(tmp_path):
    rng = make_rng(0)
    labels = np.repeat(np.array([1, 2, 3], np.uint8), 30)
    imgs = rng.integers(0, 256, size=(90, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "img.idx", imgs)
    write_idx(tmp_path / "lab.idx", labels)
    src = [f"idx_train_images={tmp_path / 'img.idx'}", f"idx_train_labels={tmp_path / 'lab.idx'}",
           f"idx_test_images={tmp_path / 'img.idx'}", f"idx_test_labels={tmp_path / 'lab.idx'}"]
    out = tmp_path / "arith"
    assert main(["simulate", "-q", "source=mnist_arithmetic", "n=10", "n_test=10", "replicates=3",
                 f"output={out}"] + src) == 0
    reps = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert reps == ["rep_00", "rep_01", "rep_02"]
    blobs = {(out / r / "train" / "predictor_0.f64").read_bytes() for r in reps}
    assert len(blobs) == 3
    ds = PairedDataset.load(out / "rep_01" / "test")
    assert ds.predictors[0].shape == (10, 28 * 84)
