"""Command-line entry point: ``birdgp <command> [-c config.txt] [--threads N] [key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as ds
from .basis import BasisNetConfig, BasisSet, VoxelGrid
from .errors import BirdGPError, InvalidConfig, NumericalFailure
from .importance import block_labels, importance_measure
from .metrics import accuracy_and_proportion, correlation_matrix, coverage_rate, mse, subject_order, write_pgm
from .numerics import make_rng, read_tensor, write_tensor
from .pipeline import FittedModel, PipelineConfig, StageError, fit_model, predict_intervals, predict_mean, write_timings
from .projection import ProjectionPriors, project_new
from .svgd import SvgdConfig

log = logging.getLogger("birdgp")

COMMANDS = ("simulate", "fit", "predict", "importance", "evaluate", "export-basis")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# stream offsets for replicate datasets
STREAM_REPLICATE_TRAIN = 1000
STREAM_REPLICATE_TEST = 2000
STREAM_SCENARIO = 10


@dataclass
class ExperimentConfig:
    # shared
    seed: int = 0
    output: str = ""
    dataset: str = ""
    split: str = ""  # subdirectory of ``dataset``; empty picks train for fit, test otherwise
    model: str = ""
    # simulate
    source: str = "scenario"  # scenario | mnist_arithmetic | fashion_quartile
    scenario: int = 1
    n: int = 714
    n_test: int = 714
    replicates: int = 1
    grid_rows: int = 32
    grid_cols: int = 32
    gen_kernel: str = "matern"
    gen_length_scale: float = 0.2
    gen_k_x: int = 50
    gen_k_y: int = 50
    snr: float = 0.5
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    glyph_length: tuple = (12, 20)
    glyph_thickness: tuple = (2, 4)
    glyph_jitter: int = 3
    # fit
    k_x: tuple = (50,)
    k_y: int = 50
    basis_method: str = "dnn"
    length_scale: float = 0.2
    kernel_subsample: int = 0  # 0 = dense eigenproblem
    orthonormalization: str = "svd"
    basis_hidden: tuple = (128, 128, 128, 128)
    basis_activation: str = "relu"
    basis_epochs: int = 1000
    basis_batch_voxels: int = 256
    basis_lr: float = 1e-3
    basis_weight_decay: float = 1e-4
    basis_p_update: str = "joint"
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    a_lambda: float = 1.0
    b_lambda: float = 1.0
    gibbs_iters: int = 1000
    gibbs_burn_in: int = 200
    bnn_hidden: tuple = (200,)
    bnn_activation: str = "relu"
    n_particles: int = 20
    svgd_epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    a_w: float = 1.0
    b_w: float = 10.0
    svgd_a_lambda: float = 1.0
    svgd_b_lambda: float = 1.0
    bandwidth_rule: str = "median_sq"
    rescale_likelihood: bool = True
    weight_init: str = "fan_in"
    seed_lambda_from_projection: bool = True
    use_covariates: bool = True
    # predict
    levels: tuple = (0.95,)
    draws_per_particle: int = 20
    # evaluate
    predictions: str = ""
    mask_mode: str = "row"
    q: float = 0.05
    min_region: int = 500
    alpha_points: int = 101
    # export-basis
    order: str = "eigenvalue"  # eigenvalue | importance
    importance: str = ""

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            k_x=tuple(self.k_x) if len(self.k_x) > 1 else self.k_x[0],
            k_y=self.k_y,
            basis_method=self.basis_method,
            length_scale=self.length_scale,
            kernel_subsample=self.kernel_subsample or None,
            orthonormalization=self.orthonormalization,
            basis_net=BasisNetConfig(
                hidden=tuple(self.basis_hidden), activation=self.basis_activation, epochs=self.basis_epochs,
                batch_voxels=self.basis_batch_voxels, lr=self.basis_lr, weight_decay=self.basis_weight_decay,
                p_update=self.basis_p_update,
            ),
            priors=ProjectionPriors(self.a_sigma, self.b_sigma, self.a_lambda, self.b_lambda),
            gibbs_iters=self.gibbs_iters,
            gibbs_burn_in=self.gibbs_burn_in,
            bnn_hidden=tuple(self.bnn_hidden),
            bnn_activation=self.bnn_activation,
            svgd=SvgdConfig(
                n_particles=self.n_particles, epochs=self.svgd_epochs, batch_size=self.batch_size, lr=self.lr,
                a_w=self.a_w, b_w=self.b_w, a_lambda=self.svgd_a_lambda, b_lambda=self.svgd_b_lambda,
                bandwidth_rule=self.bandwidth_rule, rescale_likelihood=self.rescale_likelihood,
                weight_init=self.weight_init,
            ),
            seed_lambda_from_projection=self.seed_lambda_from_projection,
            seed=self.seed,
        )


def _parse_value(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise InvalidConfig(f"cannot parse {key} = {text!r}") from None


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(t) for t in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def parse_pairs(lines, command: str | None = None) -> dict:
    out = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k == "command":
            if command is not None and v != command:
                raise InvalidConfig(f"config was resolved for {v!r}, not {command!r}")
            continue
        out[k] = v
    return out


def resolve_config(pairs: dict) -> ExperimentConfig:
    """Defaults overlaid with ``pairs``; unknown keys are rejected."""
    defaults = ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _parse_value(getattr(defaults, k), v, k) for k, v in pairs.items()}
    return ExperimentConfig(**values)


def write_resolved(cfg: ExperimentConfig, command: str, directory: Path) -> None:
    lines = [f"command = {command}"] + [f"{k} = {_format_value(v)}" for k, v in asdict(cfg).items()]
    (directory / "config.resolved.txt").write_text("\n".join(lines) + "\n")


def _write_manifest(directory: Path, command: str, extra: dict | None = None) -> None:
    files = sorted(str(p.relative_to(directory)) for p in directory.rglob("*") if p.is_file() and p.name != "manifest.txt")
    lines = [f"command = {command}"] + [f"{k} = {v}" for k, v in (extra or {}).items()]
    lines += [f"file = {f}" for f in files]
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def _require(cfg: ExperimentConfig, *keys: str) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise InvalidConfig(f"missing required keys: {', '.join(missing)}")


def _dataset(cfg: ExperimentConfig, default_split: str) -> ds.PairedDataset:
    root = Path(cfg.dataset)
    if (root / "dataset.txt").exists():
        return ds.PairedDataset.load(root)
    split = cfg.split or default_split
    if (root / split / "dataset.txt").exists():
        return ds.PairedDataset.load(root / split)
    raise FileNotFoundError(f"no dataset at {root} or {root / split}")


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: ExperimentConfig, out: Path) -> None:
    if cfg.source == "scenario":
        if cfg.scenario not in (1, 2, 3):
            raise InvalidConfig(f"scenario must be 1, 2 or 3, got {cfg.scenario}")
        grid = VoxelGrid.regular(cfg.grid_rows, cfg.grid_cols)
        bx = ds.generating_basis(grid, cfg.gen_kernel, cfg.gen_length_scale, cfg.gen_k_x)
        by = bx if cfg.scenario == 3 else ds.generating_basis(grid, cfg.gen_kernel, cfg.gen_length_scale, cfg.gen_k_y)
        spec = ds.ScenarioSpec(cfg.scenario, n=cfg.n, k_x=bx.K, k_y=by.K, snr=cfg.snr)
        train, test, truth = ds.simulate_scenario(spec, bx, by, make_rng(cfg.seed, STREAM_SCENARIO), n_test=cfg.n_test)
        train.save(out / "train")
        if test is not None:
            test.save(out / "test")
        _save_truth(truth, bx, by, out / "truth")
        return

    if cfg.source not in ("mnist_arithmetic", "fashion_quartile"):
        raise InvalidConfig(f"unknown source {cfg.source!r}")
    _require(cfg, "idx_train_images", "idx_train_labels")
    Xtr, _, ltr = ds.load_idx(cfg.idx_train_images, cfg.idx_train_labels)
    test_src = None
    if cfg.n_test:
        _require(cfg, "idx_test_images", "idx_test_labels")
        test_src = ds.load_idx(cfg.idx_test_images, cfg.idx_test_labels)
    for r in range(cfg.replicates):
        target = out / f"rep_{r:02d}" if cfg.replicates > 1 else out
        rng_tr = make_rng(cfg.seed, STREAM_REPLICATE_TRAIN + r)
        rng_te = make_rng(cfg.seed, STREAM_REPLICATE_TEST + r)
        if cfg.source == "mnist_arithmetic":
            glyph = ds.GlyphConfig(tuple(cfg.glyph_length), tuple(cfg.glyph_thickness), cfg.glyph_jitter)
            ds.make_mnist_arithmetic(Xtr, ltr, cfg.n, rng_tr, glyph).save(target / "train")
            if test_src is not None:
                ds.make_mnist_arithmetic(test_src[0], test_src[2], cfg.n_test, rng_te, glyph).save(target / "test")
        else:
            _quartile_sample(Xtr, ltr, cfg.n, rng_tr).save(target / "train")
            if test_src is not None:
                _quartile_sample(test_src[0], test_src[2], cfg.n_test, rng_te).save(target / "test")


def _quartile_sample(X, labels, n, rng) -> ds.PairedDataset:
    if n > X.shape[0]:
        raise ds.InsufficientData(f"requested {n} images from a split of {X.shape[0]}")
    idx = np.sort(rng.choice(X.shape[0], size=n, replace=False))
    return ds.make_quartile_split(X[idx], labels[idx])


def _save_truth(truth: dict, bx: BasisSet, by: BasisSet, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    bx.save(d / "x_basis")
    by.save(d / "y_basis")
    for key in ("B", "lam", "beta0", "beta1"):
        if key in truth:
            write_tensor(d / f"{key}.f64", np.asarray(truth[key]))
    if "network" in truth:
        truth["network"].save(d / "network")
    (d / "truth.txt").write_text(f"scenario = {truth['scenario']}\n")


def cmd_fit(cfg: ExperimentConfig, out: Path) -> None:
    _require(cfg, "dataset")
    train = _dataset(cfg, "train")
    pcfg = cfg.pipeline()
    covariates = train.covariates if cfg.use_covariates else None
    model = fit_model(train.predictors, train.x_grids, train.outcomes, train.y_grid, pcfg,
                      covariates=covariates, log=log.info)
    model.save(out / "model")
    write_timings(out / "timings.csv", model.timings)
    for stage, sec in model.timings.items():
        log.info("%-28s %8.2f s", stage, sec)


def cmd_predict(cfg: ExperimentConfig, out: Path) -> None:
    _require(cfg, "model", "dataset")
    model = FittedModel.load(cfg.model)
    data = _dataset(cfg, "test")
    cov = data.covariates if model.n_covariates else None
    write_tensor(out / "mean.f64", predict_mean(model, data.predictors, cov))
    if cfg.levels:
        iv = predict_intervals(model, data.predictors, cov, levels=tuple(cfg.levels),
                               draws_per_particle=cfg.draws_per_particle, rng=make_rng(cfg.seed, 5))
        for lv, (lo, hi) in iv.items():
            write_tensor(out / f"lower_{lv:g}.f64", lo)
            write_tensor(out / f"upper_{lv:g}.f64", hi)


def cmd_importance(cfg: ExperimentConfig, out: Path) -> None:
    _require(cfg, "model")
    model = FittedModel.load(cfg.model)
    if cfg.dataset:
        data = _dataset(cfg, "train")
        Xin = model.inputs(data.predictors, data.covariates if model.n_covariates else None)
        Yc = project_new(data.outcomes, model.y_basis, model.y_sigma2)[0]
    else:
        if model.train_x is None:
            raise InvalidConfig("model has no stored training pairs; set dataset")
        Xin, Yc = model.train_x, model.train_y
    report = importance_measure(model.ensemble, Xin, Yc, blocks=block_labels(model.block_widths))
    report.to_csv(out / "importance.csv")


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> None:
    _require(cfg, "predictions", "dataset")
    pdir = Path(cfg.predictions)
    pred = read_tensor(pdir / "mean.f64")
    data = _dataset(cfg, "test")
    obs = data.outcomes
    cm = correlation_matrix(pred, obs, cfg.mask_mode, cfg.q)
    cm.to_csv(out / "correlation.csv")
    curve = accuracy_and_proportion(cm, np.linspace(0.0, 1.0, cfg.alpha_points))
    curve.to_csv(out / "accuracy.csv", out / "proportion.csv")
    overall, per = mse(pred, obs, data.labels)
    with open(out / "mse.csv", "w") as fh:
        fh.write("label,mse\n")
        fh.write(f"all,{overall!r}\n")
        for lab, v in per.items():
            fh.write(f"{lab},{v!r}\n")
    lines = []
    for lo_path in sorted(pdir.glob("lower_*.f64")):
        level = lo_path.stem[len("lower_"):]
        rate, per_img = coverage_rate(read_tensor(lo_path), read_tensor(pdir / f"upper_{level}.f64"), obs)
        lines.append(f"{level},{rate!r},{float(per_img.std())!r}")
    if lines:
        (out / "coverage.csv").write_text("level,mean_coverage,sd_over_images\n" + "\n".join(lines) + "\n")
    order = subject_order(curve, cm.region_sizes, cfg.min_region)
    filtered = True
    if order.size < 2:
        order = subject_order(curve)
        filtered = False
    heat = cm.C[np.ix_(order, order)]
    write_pgm(out / "correlation_heatmap.pgm", heat, -1.0, 1.0)
    with open(out / "heatmap_subjects.csv", "w") as fh:
        fh.write("position,subject\n")
        fh.writelines(f"{i},{s}\n" for i, s in enumerate(order))
    (out / "heatmap.txt").write_text(f"min_region = {cfg.min_region}\nfilter_applied = {str(filtered).lower()}\n")
    grid = data.y_grid
    if grid.shape is not None and len(grid.shape) == 2:
        (out / "images").mkdir(exist_ok=True)
        lo, hi = float(min(pred.min(), obs.min())), float(max(pred.max(), obs.max()))
        for i in order[: min(10, order.size)]:
            write_pgm(out / "images" / f"predicted_{i:04d}.pgm", pred[i].reshape(grid.shape), lo, hi)
            write_pgm(out / "images" / f"observed_{i:04d}.pgm", obs[i].reshape(grid.shape), lo, hi)
    valid = curve.a[~np.isnan(curve.a)]
    log.info("mse %.6g, median a_i %s", overall, f"{np.median(valid):.3f}" if valid.size else "undefined")


def cmd_export_basis(cfg: ExperimentConfig, out: Path) -> None:
    _require(cfg, "model")
    if cfg.order not in ("eigenvalue", "importance"):
        raise InvalidConfig(f"order must be eigenvalue or importance, got {cfg.order!r}")
    model = FittedModel.load(cfg.model)
    ranks = None
    if cfg.order == "importance":
        _require(cfg, "importance")
        ranks = _read_ranks(cfg.importance)
    offset = 0
    sets = [(f"x_basis_{c}", b) for c, b in enumerate(model.x_bases)] + [("y_basis", model.y_basis)]
    for name, basis in sets:
        order = np.arange(basis.K)
        if ranks is not None and name != "y_basis":
            order = np.argsort(ranks[offset: offset + basis.K], kind="stable")
        if name != "y_basis":
            offset += basis.K
        _export_columns(basis, order, out / name)


def _read_ranks(path) -> np.ndarray:
    rows = Path(path).read_text().splitlines()[1:]
    return np.array([int(r.split(",")[2]) for r in rows if r])


def _export_columns(basis: BasisSet, order, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    shape = basis.grid.shape
    with open(d / "order.csv", "w") as fh:
        fh.write("position,column,eigenvalue\n")
        for pos, k in enumerate(order):
            ev = "" if basis.eigenvalues is None else repr(float(basis.eigenvalues[k]))
            fh.write(f"{pos},{k},{ev}\n")
    write_tensor(d / "psi.f64", basis.psi[:, order])
    if shape is None or len(shape) != 2:
        return
    for pos, k in enumerate(order):
        col = basis.psi[:, k]
        m = float(np.abs(col).max()) or 1.0
        write_pgm(d / f"basis_{pos:03d}.pgm", col.reshape(shape), -m, m)


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "importance": cmd_importance,
    "evaluate": cmd_evaluate,
    "export-basis": cmd_export_basis,
}

DATA_ERRORS = (BirdGPError, FileNotFoundError, OSError)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code(exc.cause)
    if isinstance(exc, InvalidConfig):
        return EXIT_USAGE
    if isinstance(exc, (NumericalFailure, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERICAL
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    raise exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="birdgp", description="Bayesian image-on-image regression.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("-c", "--config", help="key = value config file")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (results do not depend on it)")
    p.add_argument("-q", "--quiet", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise InvalidConfig("--threads must be >= 1")
        pairs = {}
        if args.config:
            if not Path(args.config).is_file():
                raise InvalidConfig(f"config file {args.config} not found")
            pairs.update(parse_pairs(Path(args.config).read_text().splitlines(), args.command))
        pairs.update(parse_pairs(args.overrides, args.command))
        cfg = resolve_config(pairs)
        _require(cfg, "output")
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, args.command, out)
        with threadpool_limits(limits=args.threads):
            HANDLERS[args.command](cfg, out)
        _write_manifest(out, args.command)
    except Exception as exc:  # noqa: BLE001
        code = exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
