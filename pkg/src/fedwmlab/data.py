"""Datasets: IDX-format ingestion and a seeded synthetic generator.

The synthetic generator emits class-conditional blob images (one blob
position per class, jittered, with pixel noise) so the whole laboratory
runs offline and deterministically. IDX files follow the MNIST layout:
big-endian magic + dimensions, one unsigned byte per pixel/label; gzipped
files are detected transparently.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from fedwmlab.seeding import derive_seed

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class Dataset:
    name: str
    train_images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    train_labels: np.ndarray  # (N,) int64
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train_images.shape[1:])


def synthetic_blobs(num_train: int, num_test: int, shape=(28, 28, 1),
                    num_classes: int = 10, seed: int = 0,
                    noise_std: float = 0.15, ring_radius: float = 0.30,
                    blob_sigma: float = 0.10, jitter_amp: float = 0.06,
                    name: str = "synthetic") -> Dataset:
    """Class-conditional blob images: class k places a Gaussian bump at the
    k-th position on a ring, with positional jitter and additive noise."""
    height, width, channels = shape
    rng = np.random.default_rng(derive_seed(seed, "synthetic", shape, num_classes))
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.stack([
        0.5 + ring_radius * np.cos(angles),
        0.5 + ring_radius * np.sin(angles),
    ], axis=1)  # (K, 2) in relative (row, col) coords
    tints = 0.55 + 0.45 * rng.uniform(size=(num_classes, channels))
    ys = np.arange(height)[:, None] / (height - 1)
    xs = np.arange(width)[None, :] / (width - 1)
    sigma = blob_sigma

    def make_split(count: int):
        labels = rng.integers(0, num_classes, size=count).astype(np.int64)
        images = np.empty((count, height, width, channels), dtype=np.float32)
        jitter = rng.uniform(-jitter_amp, jitter_amp, size=(count, 2))
        amps = rng.uniform(0.75, 1.0, size=count)
        noise = rng.normal(0.0, noise_std, size=(count, height, width, channels))
        for i, label in enumerate(labels):
            cy, cx = centers[label] + jitter[i]
            d2 = (ys - cy) ** 2 + (xs - cx) ** 2
            blob = amps[i] * np.exp(-d2 / (2.0 * sigma * sigma))
            images[i] = blob[:, :, None] * tints[label][None, None, :]
        images = np.clip(images + noise, 0.0, 1.0).astype(np.float32)
        return images, labels

    train_images, train_labels = make_split(num_train)
    test_images, test_labels = make_split(num_test)
    return Dataset(name=name, train_images=train_images, train_labels=train_labels,
                   test_images=test_images, test_labels=test_labels,
                   num_classes=num_classes)


# -- IDX ----------------------------------------------------------------------


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into (N, H, W, 1) float32 in [0, 1]."""
    with _open_maybe_gzip(path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad IDX image magic {magic} "
                             f"(expected {IDX_IMAGES_MAGIC})")
        raw = fh.read(count * rows * cols)
    if len(raw) != count * rows * cols:
        raise ValueError(f"{path}: truncated IDX image file")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    return (images.astype(np.float32) / 255.0)[:, :, :, None]


def load_idx_labels(path) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        magic, count = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad IDX label magic {magic} "
                             f"(expected {IDX_LABELS_MAGIC})")
        raw = fh.read(count)
    if len(raw) != count:
        raise ValueError(f"{path}: truncated IDX label file")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images: np.ndarray):
    """Write (N, H, W) or (N, H, W, 1) pixels in [0, 1] as an IDX file."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        arr = arr[:, :, :, 0]
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *data.shape))
        fh.write(data.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    data = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(data)))
        fh.write(data.tobytes())


def load_idx_dataset(train_images, train_labels, test_images, test_labels,
                     limit_train: int = None, limit_test: int = None,
                     name: str = "idx") -> Dataset:
    xtr, ytr = load_idx_images(train_images), load_idx_labels(train_labels)
    xte, yte = load_idx_images(test_images), load_idx_labels(test_labels)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise ValueError("image/label counts disagree")
    if limit_train:
        xtr, ytr = xtr[:limit_train], ytr[:limit_train]
    if limit_test:
        xte, yte = xte[:limit_test], yte[:limit_test]
    num_classes = int(max(ytr.max(), yte.max())) + 1
    return Dataset(name=name, train_images=xtr, train_labels=ytr,
                   test_images=xte, test_labels=yte, num_classes=num_classes)


def load_dataset(spec: dict) -> Dataset:
    """Build a Dataset from a config mapping (see README for the schema)."""
    spec = dict(spec)
    kind = spec.pop("kind", "synthetic-gray")
    if kind in ("synthetic-gray", "synthetic-rgb"):
        shape = (28, 28, 1) if kind == "synthetic-gray" else (32, 32, 3)
        return synthetic_blobs(
            num_train=int(spec.pop("train", 2000)),
            num_test=int(spec.pop("test", 500)),
            shape=tuple(spec.pop("shape", shape)),
            num_classes=int(spec.pop("classes", 10)),
            seed=int(spec.pop("seed", 0)),
            noise_std=float(spec.pop("noise_std", 0.15)),
            ring_radius=float(spec.pop("ring_radius", 0.30)),
            blob_sigma=float(spec.pop("blob_sigma", 0.10)),
            jitter_amp=float(spec.pop("jitter_amp", 0.06)),
            name=kind)
    if kind == "idx":
        return load_idx_dataset(
            spec.pop("train_images"), spec.pop("train_labels"),
            spec.pop("test_images"), spec.pop("test_labels"),
            limit_train=spec.pop("limit_train", None),
            limit_test=spec.pop("limit_test", None))
    raise ValueError(f"unknown dataset kind {kind!r}")
