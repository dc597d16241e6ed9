"""Convert the per-class JSON dump of the npm ``fashion-mnist`` package to the four standard IDX files.

Each class file holds 7000 flattened 28x28 uint8 images; the first 6000 go to the
training split and the last 1000 to the test split. Empty entries are dropped.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from birdgp.data import write_idx

N_TEST_PER_CLASS = 1000


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("clothes_dir", type=Path, help="the package's src/clothes directory")
    ap.add_argument("output", type=Path)
    args = ap.parse_args()

    parts = {"train": ([], []), "t10k": ([], [])}
    for c in range(10):
        rows = [r for r in json.loads((args.clothes_dir / f"{c}.json").read_text())["data"] if len(r) == 784]
        imgs = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        for split, chunk in (("train", imgs[:-N_TEST_PER_CLASS]), ("t10k", imgs[-N_TEST_PER_CLASS:])):
            parts[split][0].append(chunk)
            parts[split][1].append(np.full(len(chunk), c, np.uint8))
    args.output.mkdir(parents=True, exist_ok=True)
    for split, (imgs, labs) in parts.items():
        write_idx(args.output / f"{split}-images-idx3-ubyte", np.concatenate(imgs))
        write_idx(args.output / f"{split}-labels-idx1-ubyte", np.concatenate(labs))
        print(split, sum(len(x) for x in imgs))


if __name__ == "__main__":
    main()
