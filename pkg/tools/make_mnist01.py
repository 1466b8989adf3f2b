"""Build the two-class MNIST fixture (digits 0 and 1) as gzipped IDX files.

Source: the 5000-image MNIST sample shipped inside the mlxtend wheel
(``mlxtend/data/data/mnist_5k.csv.gz``; 500 images per digit, 784 pixel
columns followed by the label).  Fetch the wheel with

    pip download --no-deps mlxtend==0.24.0 -d /tmp/mlx

then run

    python3 tools/make_mnist01.py /tmp/mlx/mlxtend-0.24.0-py3-none-any.whl data/mnist01

Images are shuffled with a fixed seed and split 800 train / 200 test, each
class balanced in the test file.
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from bblstm.data import write_idx
from bblstm.stochastic import RngStream

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel")
    ap.add_argument("out_dir")
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        table = np.loadtxt(io.BytesIO(gzip.decompress(zf.read(MEMBER))), delimiter=",")
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.int64)
    keep = np.flatnonzero(labels <= 1)
    order = keep[RngStream(20240101).permutation(len(keep))]
    test = np.concatenate([order[labels[order] == d][: args.test_per_class] for d in (0, 1)])
    test = order[np.isin(order, test)]
    train = order[~np.isin(order, test)]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train), ("test", test)):
        write_idx(out / f"{split}-images-idx3-ubyte.gz", pixels[idx].reshape(-1, 28, 28))
        write_idx(out / f"{split}-labels-idx1-ubyte.gz", labels[idx].astype(np.uint8))
        print(f"{split}: {len(idx)} images, class counts {np.bincount(labels[idx]).tolist()}")


if __name__ == "__main__":
    main()
