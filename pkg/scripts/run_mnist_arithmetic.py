"""MNIST arithmetic ("2 +/- 1"): substitute-classifier accuracy of predicted outcome digits per replicate."""
import argparse

import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("idx_dir", help="directory with the four MNIST IDX files")
    ap.add_argument("--replicates", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    for r in experiments.arithmetic_run(args.idx_dir, replicates=args.replicates, seed=args.seed):
        print(f"replicate {r['replicate']}: train acc {r['train_acc']:.3f}, test acc {r['test_acc']:.3f} "
              f"(classifier on real digits {r['classifier_train_acc']:.3f})")


if __name__ == "__main__":
    main()
