"""Write the 5,000-digit MNIST sample shipped with mlxtend as IDX files.

Usage: python3 scripts/fetch_mnist_sample.py [DIR]   (default: $MILFORGE_DATA_DIR or ~/.milforge/data)
"""

import gzip
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from milforge.data import default_data_dir, write_idx


def load_sample() -> tuple[np.ndarray, np.ndarray]:
    src = resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    with src.open("rb") as raw, gzip.open(raw, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.uint8)
    return table[:, :784].reshape(-1, 28, 28), table[:, 784]


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else default_data_dir()
    out.mkdir(parents=True, exist_ok=True)
    images, labels = load_sample()
    write_idx(out / "train-images-idx3-ubyte.gz", images)
    write_idx(out / "train-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} digits to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
