"""Datasets: CIFAR-10 binary reader/writer, synthetic Gaussian blobs, subsampling."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import FormatError, InputError
from .seeding import numpy_rng

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
BLOBS_FORMAT_VERSION = 1


@dataclass
class Dataset:
    """Inputs in [0, 1] with integer labels.

    ``indices`` are positions in the original, unsubsampled dataset; they
    become the ``idx`` column of certification output. ``extras`` holds
    per-example arrays (e.g. analytic margins), ``meta`` dataset-level values.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    indices: np.ndarray | None = None
    extras: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise InputError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if self.indices is None:
            self.indices = np.arange(len(self.y))
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise InputError(f"labels must lie in 0..{self.num_classes - 1}")
        if self.x.size and (self.x.min() < 0 or self.x.max() > 1):
            raise InputError("inputs must lie in [0, 1]")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def take(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        extras = {k: np.asarray(v)[positions] for k, v in self.extras.items()}
        return replace(self, x=self.x[positions], y=self.y[positions], indices=self.indices[positions], extras=extras)


# ---------------------------------------------------------------- CIFAR-10


def _parse_cifar_bytes(raw: bytes, source: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD
        raise FormatError(
            f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record starts at byte offset {full * CIFAR_RECORD}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: label byte {labels[bad[0]]} > 9 in record {bad[0]} (offset {bad[0] * CIFAR_RECORD})")
    return arr[:, 1:].reshape(-1, 3, 32, 32), labels.astype(np.int64)


def read_cifar10_binary(path, split: str = "test") -> Dataset:
    """Read one CIFAR-10 ``.bin`` file, or the train/test files of a directory.

    Records are 1 label byte followed by 3x32x32 channel-planar pixel bytes;
    pixels are scaled by 1/255.
    """
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    else:
        files = [path]
    pixels, labels = [], []
    for f in files:
        p, lab = _parse_cifar_bytes(f.read_bytes(), str(f))
        pixels.append(p)
        labels.append(lab)
    x = np.concatenate(pixels).astype(np.float32) / np.float32(255.0)
    return Dataset(x, np.concatenate(labels), 10, split)


def cifar10_bytes(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    """Encode uint8 pixels (N, 3, 32, 32) and labels as CIFAR-10 binary records."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    return rec.tobytes()


def write_cifar10_binary(path, dataset: Dataset) -> None:
    pixels = np.rint(dataset.x * 255.0).astype(np.uint8)
    Path(path).write_bytes(cifar10_bytes(pixels, dataset.y))


# ---------------------------------------------------------------- synthetic


def synthetic_blobs(dim: int, num_classes: int = 2, separation: float = 0.6, spread: float = 0.1,
                    count: int = 1000, seed: int = 0, split: str = "train") -> Dataset:
    """Two isotropic Gaussian clusters at +-separation/2 along the first axis, shifted by 0.5 into the unit box.

    Class 1 sits on the positive side. The Bayes-optimal separator is
    ``x[0] = 0.5`` (``w = e1``, ``b = -0.5``), kept in ``meta``; ``extras``
    carries every point's distance to it, measured after clipping to [0, 1].
    """
    if num_classes != 2:
        raise InputError("synthetic blobs are two-class")
    if separation <= 0:
        raise InputError("separation must be positive")
    rng = numpy_rng(seed, "blobs", {"train": 0, "test": 1}.get(split, 2))
    y = rng.integers(0, 2, size=count)
    x = spread * rng.standard_normal((count, dim))
    x[:, 0] += np.where(y == 1, separation / 2, -separation / 2)
    x = np.clip(x + 0.5, 0.0, 1.0).astype(np.float32)
    w = np.zeros(dim)
    w[0] = 1.0
    margins = np.abs(x[:, 0].astype(np.float64) - 0.5)
    return Dataset(x, y, 2, split, extras={"margin": margins}, meta={"w": w, "b": -0.5})


def bayes_accuracy(separation: float, spread: float) -> float:
    return float(norm.cdf(separation / (2 * spread)))


def save_dataset(path, dataset: Dataset) -> None:
    """Versioned ``.npz`` container; extras and meta are stored under ``extra_`` / ``meta_`` prefixes."""
    payload = {
        "format_version": np.array(BLOBS_FORMAT_VERSION),
        "x": dataset.x,
        "y": dataset.y,
        "num_classes": np.array(dataset.num_classes),
        "split": np.array(dataset.split),
        "indices": dataset.indices,
    }
    payload.update({f"extra_{k}": np.asarray(v) for k, v in dataset.extras.items()})
    payload.update({f"meta_{k}": np.asarray(v) for k, v in dataset.meta.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != BLOBS_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported dataset format version {version}")
        extras = {k[len("extra_"):]: z[k] for k in z.files if k.startswith("extra_")}
        meta = {k[len("meta_"):]: (z[k].item() if z[k].ndim == 0 else z[k]) for k in z.files if k.startswith("meta_")}
        return Dataset(z["x"], z["y"], int(z["num_classes"]), str(z["split"]), z["indices"], extras, meta)


def subsample_every(dataset: Dataset, stride: int = 20) -> Dataset:
    """Keep positions 0, stride, 2*stride, ... in order; original indices are preserved."""
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    return dataset.take(np.arange(0, len(dataset), stride))

