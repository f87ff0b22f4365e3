"""Convert the digits shipped with the `mnist` npm package into gzipped IDX files.

The package stores 10,000 MNIST digits as one JSON file per class with
pixel intensities in [0, 1]. This writes them, in a seeded random order, to

    data/mnist-subset10k/train-images-idx3-ubyte.gz
    data/mnist-subset10k/train-labels-idx1-ubyte.gz

Usage: python demos/make_mnist_subset.py <path to the npm package directory>
       (get it with `npm pack mnist@1.1.0` and untar)
"""
import json
import sys
from pathlib import Path

import numpy as np

from varprune.data import write_idx

pkg = Path(sys.argv[1])
out = Path(__file__).resolve().parent.parent / "data" / "mnist-subset10k"
out.mkdir(parents=True, exist_ok=True)

images, labels = [], []
for digit in range(10):
    flat = np.array(json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"])
    block = np.rint(flat.reshape(-1, 28, 28) * 255.0).astype(np.uint8)
    images.append(block)
    labels.append(np.full(block.shape[0], digit, dtype=np.uint8))

images = np.concatenate(images)
labels = np.concatenate(labels)
order = np.random.default_rng(0).permutation(labels.size)
write_idx(out / "train-images-idx3-ubyte.gz", images[order])
write_idx(out / "train-labels-idx1-ubyte.gz", labels[order])
print(f"wrote {labels.size} digits to {out}")
