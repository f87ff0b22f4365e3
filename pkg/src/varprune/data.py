"""Data sets: IDX (MNIST-format) files and seeded Gaussian blobs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
DATA_ENV = "VARPRUNE_DATA"


class DataError(ValueError):
    """Malformed or inconsistent data files."""


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DataError(f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx, split=None):
        return Dataset(self.inputs[idx], self.targets[idx], split or self.split)

    def reshaped(self, shape):
        return Dataset(self.inputs.reshape((len(self),) + tuple(shape)), self.targets, self.split)


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_idx(path):
    """Raw IDX array (big-endian header, unsigned bytes)."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise DataError(f"{path}: bad magic number {magic}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) != expected:
        raise DataError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return magic, np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(image_path, label_path, split="train", n_classes=10):
    """Images scaled to [0, 1] and flattened, labels one-hot."""
    magic_i, images = read_idx(image_path)
    magic_l, labels = read_idx(label_path)
    if magic_i != IMAGE_MAGIC:
        raise DataError(f"{image_path}: not an image file (magic {magic_i})")
    if magic_l != LABEL_MAGIC:
        raise DataError(f"{label_path}: not a label file (magic {magic_l})")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= n_classes:
        raise DataError(f"label {labels.max()} out of range for {n_classes} classes")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = np.eye(n_classes)[labels]
    return Dataset(x, y, split)


def write_idx(path, array):
    """Write uint8 images (N, H, W) or labels (N,) as IDX, gzipped if the name ends in .gz."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        header = struct.pack(">4I", IMAGE_MAGIC, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">2I", LABEL_MAGIC, array.shape[0])
    else:
        raise DataError(f"IDX writer takes 1-D labels or 3-D images, got {array.ndim}-D")
    raw = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root(root=None):
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise DataError(f"no data directory given and {DATA_ENV} is not set")
    return Path(root)


def _find(root, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = root / name
        if p.exists():
            return p
    raise DataError(f"{stem}[.gz] not found under {root}")


def load_mnist(root=None, split="train"):
    root = data_root(root)
    img, lab = MNIST_FILES[split]
    return load_idx(_find(root, img), _find(root, lab), split)


def synth_blobs(classes, dim, n_per_class, seed, separation=4.0, centers=None):
    """Isotropic unit-variance Gaussian clusters around seeded random centres.

    Centres are rescaled so that the closest pair sits ``separation`` apart.
    Returns the data set and the centres (pass them back in to draw a test
    split from the same clusters).
    """
    if n_per_class < 1:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.normal(size=(classes, dim))
        if classes > 1:
            d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
            centers *= separation / d[np.triu_indices(classes, 1)].min()
    x = np.concatenate([c + rng.normal(size=(n_per_class, dim)) for c in centers])
    labels = np.repeat(np.arange(classes), n_per_class)
    order = rng.permutation(x.shape[0])
    return Dataset(x[order], np.eye(classes)[labels[order]], "train"), centers


def blob_split(classes, dim, n_train, n_test, seed, separation=4.0):
    """Train and test sets (per-class counts) drawn from the same clusters."""
    train, centers = synth_blobs(classes, dim, n_train, seed, separation)
    test, _ = synth_blobs(classes, dim, n_test, seed + 1_000_003, separation, centers=centers)
    return train, Dataset(test.inputs, test.targets, "test")


def train_test_split(data, n_test, seed):
    order = np.random.default_rng(seed).permutation(len(data))
    return data.subset(order[n_test:], "train"), data.subset(order[:n_test], "test")
