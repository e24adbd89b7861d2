"""MNIST IDX ingestion and synthetic Gaussian-blob datasets."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, features) float64
    labels: np.ndarray  # (N,) int64
    split: str = ""
    note: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, k: int, seed: int = 0) -> "Dataset":
        """First k samples of a seeded permutation."""
        idx = np.random.default_rng(seed).permutation(len(self))[:k]
        return Dataset(self.images[idx], self.labels[idx], self.split,
                       f"{self.note}; subset {min(k, len(self))} (seed {seed})")


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IDXFormatError(f"{what}: truncated header ({len(buf)} bytes)")
    got = int.from_bytes(buf[:4], "big")
    if got != magic:
        raise IDXFormatError(f"{what}: bad magic {got:#010x}, expected {magic:#010x}")
    dims = [int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise IDXFormatError(f"{what}: truncated payload, need {count} bytes, have {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "") -> Dataset:
    images = _parse_idx(_read(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), split, f"idx {Path(images_path).name}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(IMAGES_MAGIC.to_bytes(4, "big"))
        for d in images.shape:
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(LABELS_MAGIC.to_bytes(4, "big"))
        fh.write(len(labels).to_bytes(4, "big"))
        fh.write(labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist_dir(explicit=None) -> Path:
    candidates = [explicit, os.environ.get("LYADEQ_MNIST_DIR"), "data/mnist",
                  Path.home() / "data" / "mnist"]
    for c in candidates:
        if not c:
            continue
        p = Path(c).expanduser()
        name = MNIST_FILES["test"][0]
        if (p / name).exists() or (p / (name + ".gz")).exists():
            return p
    raise FileNotFoundError(
        "MNIST IDX files not found; set LYADEQ_MNIST_DIR or pass --data-dir "
        f"(looked in {[str(c) for c in candidates if c]})"
    )


def load_mnist(split: str, data_dir=None) -> Dataset:
    root = find_mnist_dir(data_dir)

    def pick(name):
        p = root / name
        return p if p.exists() else root / (name + ".gz")

    img, lab = MNIST_FILES[split]
    return load_idx(pick(img), pick(lab), split)


def load_mnist_subsets(train_size=10_000, test_size=2_000, seed=0, data_dir=None):
    """Desk-scale MNIST: seeded subsets of the official splits (None = full split)."""
    train = load_mnist("train", data_dir)
    test = load_mnist("test", data_dir)
    if train_size is not None:
        train = train.subset(train_size, seed)
    if test_size is not None:
        test = test.subset(test_size, seed)
    return train, test


def synth_blobs(classes: int = 2, per_class: int = 250, separation: float = 4.0, seed: int = 0,
                split: str = "synthetic") -> Dataset:
    """Isotropic unit-variance Gaussians centred on a circle of radius ``separation``."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + rng.standard_normal((len(labels), 2))
    perm = rng.permutation(len(labels))
    return Dataset(x[perm], labels[perm].astype(np.int64), split,
                   f"blobs classes={classes} per_class={per_class} sep={separation} seed={seed}")
