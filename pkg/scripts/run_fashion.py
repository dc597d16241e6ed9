"""Fashion-MNIST quartile split: test MSE, interval coverage and basis variance explained."""
import argparse

import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("idx_dir", help="directory with the four Fashion-MNIST IDX files")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-variance", action="store_true")
    args = ap.parse_args()

    r = experiments.fashion_run(args.idx_dir, seed=args.seed)
    print(f"train MSE {r['train_mse'] * 1e4:.0f}e-4, test MSE {r['test_mse'] * 1e4:.0f}e-4")
    print(f"95% interval coverage: train {r['train_mcr']:.3f} (sd {r['train_mcr_sd']:.3f}), "
          f"test {r['test_mcr']:.3f} (sd {r['test_mcr_sd']:.3f})")
    for label, v in sorted(r["test_mse_by_label"].items()):
        print(f"  label {label}: test MSE {v * 1e4:.0f}e-4")
    print("stage seconds:", {k: round(v, 1) for k, v in r["timings"].items()})
    if not args.skip_variance:
        ve = experiments.fashion_variance_explained(args.idx_dir, seed=args.seed)
        print(f"variance explained by first 50 of 100 bases: predictor {ve['predictor']:.4f}, outcome {ve['outcome']:.4f}")


if __name__ == "__main__":
    main()
