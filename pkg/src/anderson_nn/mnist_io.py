"""Reading MNIST IDX files and turning them into training matrices.

Images are flattened row-major into 784-vectors and stored as columns, so a
dataset of N samples has ``inputs`` of shape (784, N) and ``targets_onehot`` of
shape (10, N).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import SizeMismatch

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
N_CLASSES = 10

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    pass


class WrongMagic(IdxError):
    pass


class Truncated(IdxError):
    pass


class LabelOutOfRange(IdxError):
    pass


class NotEnoughSamples(ValueError):
    pass


@dataclass(frozen=True)
class RawImages:
    count: int
    rows: int
    cols: int
    pixels: np.ndarray  # uint8, (count, rows, cols)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n0, N), values in [0, 1]
    targets_onehot: np.ndarray  # (10, N)
    labels: np.ndarray  # (N,), ints 0..9

    def __post_init__(self):
        for a in (self.inputs, self.targets_onehot, self.labels):
            a.setflags(write=False)

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def _header(data: bytes, magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(data) < need:
        raise Truncated(f"header needs {need} bytes, got {len(data)}")
    values = struct.unpack(f">{1 + n_dims}I", data[:need])
    if values[0] != magic:
        raise WrongMagic(f"expected magic 0x{magic:08x}, got 0x{values[0]:08x}")
    return values[1:]


def parse_idx_images(data: bytes) -> RawImages:
    data = _maybe_gunzip(bytes(data))
    count, rows, cols = _header(data, IMAGES_MAGIC, 3)
    n = count * rows * cols
    payload = data[16:16 + n]
    if len(payload) < n:
        raise Truncated(f"declared {count}x{rows}x{cols} pixels, only {len(payload)} bytes present")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols).copy()
    return RawImages(count=count, rows=rows, cols=cols, pixels=pixels)


def parse_idx_labels(data: bytes) -> np.ndarray:
    data = _maybe_gunzip(bytes(data))
    (count,) = _header(data, LABELS_MAGIC, 1)
    payload = data[8:8 + count]
    if len(payload) < count:
        raise Truncated(f"declared {count} labels, only {len(payload)} bytes present")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise LabelOutOfRange(f"label byte {labels[bad[0]]} at index {bad[0]}")
    return labels


def encode_idx_images(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    return struct.pack(">4I", IMAGES_MAGIC, count, rows, cols) + pixels.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def one_hot(labels, n_classes: int = N_CLASSES, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    Y = np.zeros((n_classes, labels.shape[0]), dtype=dtype)
    Y[labels, np.arange(labels.shape[0])] = 1
    return Y


def build_dataset(images: RawImages, labels, n_take: int, dtype=np.float64) -> Dataset:
    """First ``n_take`` samples in file order, pixels scaled by 1/255."""
    labels = np.asarray(labels)
    if images.count != labels.shape[0]:
        raise SizeMismatch(f"{images.count} images but {labels.shape[0]} labels")
    if n_take < 1 or n_take > images.count:
        raise NotEnoughSamples(f"asked for {n_take} samples, file holds {images.count}")
    flat = images.pixels[:n_take].reshape(n_take, -1).T
    inputs = flat.astype(dtype)
    inputs /= 255
    labs = labels[:n_take].astype(np.int64)
    return Dataset(inputs=np.ascontiguousarray(inputs), targets_onehot=one_hot(labs, dtype=dtype), labels=labs)


def _read(path: str) -> bytes:
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    with open(path, "rb") as f:
        return f.read()


def load_mnist(data_dir: str, split: str = "train", n_take: int | None = None, dtype=np.float64) -> Dataset:
    """Load the train or t10k split from ``data_dir`` (raw or gzipped files)."""
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    img_name, lab_name = TRAIN_FILES if split == "train" else TEST_FILES
    images = parse_idx_images(_read(os.path.join(data_dir, img_name)))
    labels = parse_idx_labels(_read(os.path.join(data_dir, lab_name)))
    return build_dataset(images, labels, images.count if n_take is None else n_take, dtype=dtype)
