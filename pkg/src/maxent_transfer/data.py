"""Dataset readers, synthetic tasks and preprocessing.

Binary formats
--------------
IDX (MNIST): big-endian ``uint32`` magic, then one big-endian ``uint32`` size
per dimension, then raw ``uint8`` values. Magic ``0x00000803`` is a 3-D image
file (count, rows, cols); ``0x00000801`` is a 1-D label file.

CIFAR binary: fixed-size records of ``label_bytes`` label bytes followed by
3072 pixel bytes (1024 red, 1024 green, 1024 blue, each 32x32 row-major).
CIFAR-10 uses one label byte, CIFAR-100 two (coarse, fine; the fine label is
used).
"""

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateChannelError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32

DATA_DIR_ENV = "MAXENT_TRANSFER_DATA"


@dataclass
class Dataset:
    images: np.ndarray  # (M, H, W, ch) or (M, D), float64
    labels: np.ndarray  # (M,), int64
    n_classes: int
    split: str = "train"
    channel_mean: np.ndarray = None
    channel_std: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self):
        return self.images.shape[1:]

    @property
    def is_image(self):
        return self.images.ndim == 4

    def subset(self, index):
        return replace(self, images=self.images[index], labels=self.labels[index])


def data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def _parse_idx(raw, expected_magic):
    if len(raw) < 4:
        raise ParseError("file too short for an IDX magic number", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise ParseError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"truncated IDX header ({ndim} dimensions)", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise ParseError(
            f"IDX payload is {len(raw) - header} bytes, expected {expected - header}",
            offset=min(len(raw), expected),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path):
    """``uint8`` array of shape (count, rows, cols)."""
    return _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC)


def read_idx_labels(path):
    return _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC)


def load_idx(images_path, labels_path=None, n_classes=10, split="train"):
    """MNIST-style dataset; images come back as (M, rows, cols, 1) floats."""
    images = read_idx_images(images_path)
    if labels_path is None:
        labels = np.zeros(images.shape[0], dtype=np.int64)
    else:
        labels = read_idx_labels(labels_path)
        if labels.shape[0] != images.shape[0]:
            raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= n_classes:
        raise ValueError(f"label {labels.max()} out of range for {n_classes} classes")
    return Dataset(images[..., None].astype(np.float64), labels, n_classes, split)


def load_cifar_bin(paths, n_classes=10, label_bytes=None, split="train"):
    """CIFAR binary batches; images come back as (M, 32, 32, 3) floats."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    if label_bytes is None:
        label_bytes = 2 if n_classes == 100 else 1
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if not raw:
            raise ParseError(f"{path}: empty CIFAR file", offset=0)
        if len(raw) % record:
            whole = len(raw) // record
            raise ParseError(
                f"{path}: size {len(raw)} is not a multiple of the {record}-byte record",
                offset=whole * record,
            )
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        lab = recs[:, label_bytes - 1].astype(np.int64)
        bad = np.flatnonzero(lab >= n_classes)
        if bad.size:
            raise ValueError(
                f"{path}: record {bad[0]} has label {lab[bad[0]]} >= {n_classes} classes"
            )
        pix = recs[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append(pix)
        labels.append(lab)
    return Dataset(
        np.concatenate(images).astype(np.float64), np.concatenate(labels), n_classes, split
    )


def synth_centers(rng, n_classes, dim):
    return rng.standard_normal((n_classes, dim))


def synth_samples(rng, centers, m, difficulty, split="train"):
    n_classes, dim = centers.shape
    labels = np.arange(m) % n_classes
    noise_std = 0.05 + difficulty
    images = centers[labels] + noise_std * rng.standard_normal((m, dim))
    order = rng.permutation(m)
    return Dataset(images[order], labels[order], n_classes, split)


def synth_task(rng, n_classes, dim, m, difficulty=0.0):
    """Balanced Gaussian clusters around standard-normal class centers.

    The within-class noise std is ``0.05 + difficulty``; ``difficulty = 0``
    gives clusters that are far apart relative to their spread.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if m < n_classes:
        raise ValueError(f"need at least one example per class (m={m}, C={n_classes})")
    if difficulty < 0:
        raise ValueError("difficulty must be non-negative")
    centers = synth_centers(rng, n_classes, dim)
    return synth_samples(rng, centers, m, difficulty)


def _channel_axes(images):
    return tuple(range(images.ndim - 1))


def channel_stats(ds):
    axes = _channel_axes(ds.images)
    return ds.images.mean(axis=axes), ds.images.std(axis=axes)


def normalize_channels(train, apply_to):
    """Standardize ``apply_to`` per channel (last axis) with ``train`` statistics."""
    mean, std = channel_stats(train)
    bad = np.flatnonzero(std == 0)
    if bad.size:
        raise DegenerateChannelError(f"channel {bad[0]} is constant in the training split")
    return replace(
        apply_to,
        images=(apply_to.images - mean) / std,
        channel_mean=mean,
        channel_std=std,
    )


def augment_hflip(images, rng, p=0.5):
    """Flip each NHWC image left-right independently with probability ``p``."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"horizontal flip needs NHWC images, got shape {images.shape}")
    flip = rng.random(images.shape[0]) < p
    out = images.copy()
    out[flip] = out[flip, :, ::-1, :]
    return out


def split_random(ds, p_test, rng):
    """Send each example of every class to the test split with probability ``p_test``."""
    if not 0 <= p_test <= 1:
        raise ValueError(f"p_test must lie in [0, 1], got {p_test}")
    to_test = np.zeros(len(ds), dtype=bool)
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        to_test[idx] = rng.random(idx.size) < p_test
    train = ds.subset(np.flatnonzero(~to_test))
    test = ds.subset(np.flatnonzero(to_test))
    return replace(train, split="train"), replace(test, split="test")


def select_classes(ds, classes):
    """Keep only ``classes`` and relabel them ``0..len(classes)-1`` in order."""
    classes = list(classes)
    keep = np.isin(ds.labels, classes)
    lut = np.full(ds.n_classes, -1, dtype=np.int64)
    lut[classes] = np.arange(len(classes))
    return Dataset(ds.images[keep], lut[ds.labels[keep]], len(classes), ds.split)


def load_mnist(root=None):
    root = Path(root or data_dir()) / "mnist"
    train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    test = load_idx(
        root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte", split="test"
    )
    return train, test


def load_cifar10(root=None):
    root = Path(root or data_dir()) / "cifar10"
    train = load_cifar_bin([root / f"data_batch_{i}.bin" for i in range(1, 6)], 10)
    test = load_cifar_bin(root / "test_batch.bin", 10, split="test")
    return train, test


def load_cifar100(root=None):
    root = Path(root or data_dir()) / "cifar100"
    train = load_cifar_bin(root / "train.bin", 100)
    test = load_cifar_bin(root / "test.bin", 100, split="test")
    return train, test


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10, "cifar100": load_cifar100}
