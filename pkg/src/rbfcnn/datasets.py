"""Dataset readers, a synthetic desk-scale generator and the noise augmenter.

Images are float64 arrays of shape (N, H, W, C) with values in [0, 1].
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3

# MNIST noise-augmentation defaults; CIFAR-10 uses 0.05 / 0.03
MNIST_NOISE_STD = 0.35
MNIST_NOISE_CLIP = 0.3
CIFAR_NOISE_STD = 0.05
CIFAR_NOISE_CLIP = 0.03


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetFormatError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.name, self.split if split is None else split)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, what):
    if len(raw) < 8:
        raise DatasetFormatError(f"{what}: file too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DatasetFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise DatasetFormatError(f"{what}: truncated, expected {need} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, name="mnist", split=""):
    """Read an IDX image/label pair (plain or gzip)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images[..., None] / 255.0, labels.astype(np.int64), name, split)


def to_uint8(images):
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_mnist_idx(dataset, images_path, labels_path, compress=False):
    pix = to_uint8(dataset.images[..., 0])
    n, h, w = pix.shape
    img = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + pix.tobytes()
    lab = struct.pack(">II", IDX_LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        Path(path).write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def load_cifar10_binary(paths, name="cifar10", split=""):
    """Read one or more CIFAR-10 binary batch files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0]
        if lab.size and lab.max() > 9:
            raise DatasetFormatError(f"{path}: label byte {int(lab.max())} outside 0-9")
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return Dataset(np.concatenate(images) / 255.0, np.concatenate(labels), name, split)


def cifar10_bytes(dataset):
    """Serialize back to the CIFAR-10 binary record layout."""
    pix = to_uint8(dataset.images).transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    return np.hstack([dataset.labels.astype(np.uint8)[:, None], pix]).tobytes()


def synthetic_blobs(n, classes, image_size=28, seed=0, channels=1, snr=4.0, blob_width=3.0):
    """Balanced class-conditional blob images.

    Each class owns a fixed Gaussian bump location; an image is that bump
    plus pixel noise of std ``0.5 / snr`` (no noise when ``snr`` is inf).
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    labels = np.repeat(np.arange(classes), counts)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = image_size / 4
    centers = np.stack([image_size / 2 + radius * np.sin(angles), image_size / 2 + radius * np.cos(angles)], axis=1)
    protos = np.exp(-((yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2)
                    / (2 * blob_width ** 2))
    images = np.repeat(protos[labels][..., None], channels, axis=-1)
    if np.isfinite(snr):
        images = images + rng.normal(0.0, 0.5 / snr, images.shape)
    order = rng.permutation(n)
    return Dataset(np.clip(images, 0.0, 1.0)[order], labels[order], "synthetic", "")


def gaussian_clipped_noise(image, std, linf_clip, rng):
    """Add N(0, std^2) noise clamped to [-linf_clip, linf_clip]; clip to [0, 1]."""
    if std < 0 or linf_clip < 0:
        raise ValueError("std and linf_clip must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    if std == 0:
        return image.copy()
    noise = np.clip(rng.normal(0.0, std, image.shape), -linf_clip, linf_clip)
    return np.clip(image + noise, 0.0, 1.0)


def train_test_split(dataset, n_train, n_test=None, seed=0):
    """Seeded shuffle, then the first ``n_train`` for training and the next ``n_test``."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    if n_test is None:
        n_test = len(dataset) - n_train
    if n_train + n_test > len(dataset):
        raise ValueError(f"asked for {n_train}+{n_test} images from {len(dataset)}")
    return (dataset.subset(order[:n_train], "train"),
            dataset.subset(order[n_train:n_train + n_test], "test"))
