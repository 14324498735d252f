"""Write the 5,000-digit MNIST sample bundled with mlxtend as gzipped IDX files.

Usage: python scripts/make_digits_idx.py MLXTEND_WHEEL_OR_CSV_GZ OUT_DIR
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from gradselect.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src: Path) -> np.ndarray:
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    return np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")


def main(src, out):
    rows = read_rows(Path(src))
    # the bundled sample is sorted by class; store it in a fixed shuffled order
    # so that "the first n samples" is a class-mixed prefix, as in the standard files
    rows = rows[np.random.default_rng(0).permutation(len(rows))]
    images = rows[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = rows[:, -1].astype(np.uint8)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images, labels, out / "digits5k-images-idx3-ubyte.gz",
              out / "digits5k-labels-idx1-ubyte.gz", compress=True)
    print(f"wrote {len(labels)} digits to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
