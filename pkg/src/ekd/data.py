"""CIFAR binary ingestion, stratified subsampling, synthetic fixtures and batching.

Images are kept in ``(N, H, W, C)`` layout throughout. Raw CIFAR pixels stay
``uint8``; normalization happens only when batches are produced.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .exceptions import (
    CorruptRecordError,
    DatasetMissingError,
    InfeasibleFractionError,
    MalformedFileError,
)

CIFAR_SIDE = 32
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE * 3
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR100_RECORD = 2 + CIFAR_PIXELS

CIFAR10_DIR = "cifar-10-batches-bin"
CIFAR100_DIR = "cifar-100-binary"
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR100_FILES = {"train": ["train.bin"], "test": ["test.bin"]}


@dataclass(frozen=True, eq=False)
class LabeledImageSet:
    """Images with integer class labels.

    ``alt_labels`` holds the label byte that was *not* selected when a
    CIFAR-100 file was parsed (coarse labels in fine mode and vice versa) so
    that the original bytes can be reproduced.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_name: str = "train"
    alt_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, indices, split_name=None) -> "LabeledImageSet":
        indices = np.asarray(indices)
        alt = None if self.alt_labels is None else self.alt_labels[indices]
        return LabeledImageSet(
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            split_name or self.split_name,
            alt,
        )


def _split_records(raw, record_size, n_label_bytes):
    raw = np.frombuffer(bytes(raw), dtype=np.uint8)
    if raw.size % record_size != 0:
        raise MalformedFileError(
            f"{raw.size} bytes is not a multiple of the {record_size}-byte record size"
        )
    records = raw.reshape(-1, record_size)
    label_bytes = records[:, :n_label_bytes].astype(np.int64)
    # channel-major planes (R, G, B) of row-major 32x32 -> HWC
    pixels = records[:, n_label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = np.ascontiguousarray(pixels.transpose(0, 2, 3, 1))
    return images, label_bytes


def _check_labels(labels, bound, kind):
    bad = np.flatnonzero(labels >= bound)
    if bad.size:
        i = int(bad[0])
        raise CorruptRecordError(
            f"record {i}: {kind} label {int(labels[i])} is not below {bound}", i
        )


def parse_cifar10(raw_bytes, split_name="train") -> LabeledImageSet:
    """Parse CIFAR-10 binary records (1 label byte + 3072 pixel bytes each)."""
    images, label_bytes = _split_records(raw_bytes, CIFAR10_RECORD, 1)
    labels = label_bytes[:, 0]
    _check_labels(labels, 10, "class")
    return LabeledImageSet(images, labels, 10, split_name)


def parse_cifar100(raw_bytes, label_mode="fine", split_name="train") -> LabeledImageSet:
    """Parse CIFAR-100 binary records (coarse byte, fine byte, 3072 pixel bytes)."""
    if label_mode not in ("fine", "coarse"):
        raise ValueError(f"label_mode must be 'fine' or 'coarse', got {label_mode!r}")
    images, label_bytes = _split_records(raw_bytes, CIFAR100_RECORD, 2)
    coarse, fine = label_bytes[:, 0], label_bytes[:, 1]
    _check_labels(coarse, 20, "coarse")
    _check_labels(fine, 100, "fine")
    if label_mode == "fine":
        return LabeledImageSet(images, fine, 100, split_name, alt_labels=coarse)
    return LabeledImageSet(images, coarse, 20, split_name, alt_labels=fine)


def _pixel_block(images):
    if images.dtype != np.uint8 or images.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValueError("CIFAR records need uint8 images of shape (32, 32, 3)")
    return images.transpose(0, 3, 1, 2).reshape(len(images), -1)


def to_cifar10_bytes(dataset: LabeledImageSet) -> bytes:
    """Serialize to the CIFAR-10 record layout (inverse of :func:`parse_cifar10`)."""
    out = np.empty((len(dataset), CIFAR10_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = _pixel_block(dataset.images)
    return out.tobytes()


def to_cifar100_bytes(dataset: LabeledImageSet, label_mode="fine") -> bytes:
    """Serialize to the CIFAR-100 record layout.

    The unselected label byte comes from ``alt_labels``; when it is absent it
    is written as zero.
    """
    alt = dataset.alt_labels if dataset.alt_labels is not None else np.zeros_like(dataset.labels)
    coarse, fine = (alt, dataset.labels) if label_mode == "fine" else (dataset.labels, alt)
    out = np.empty((len(dataset), CIFAR100_RECORD), dtype=np.uint8)
    out[:, 0] = coarse
    out[:, 1] = fine
    out[:, 2:] = _pixel_block(dataset.images)
    return out.tobytes()


def concat(sets, split_name=None) -> LabeledImageSet:
    sets = list(sets)
    alt = None
    if all(s.alt_labels is not None for s in sets):
        alt = np.concatenate([s.alt_labels for s in sets])
    return LabeledImageSet(
        np.concatenate([s.images for s in sets]),
        np.concatenate([s.labels for s in sets]),
        sets[0].num_classes,
        split_name or sets[0].split_name,
        alt,
    )


def resolve_data_root(data_root=None) -> Path:
    """``EKD_DATA_ROOT`` overrides whatever root the caller configured."""
    env = os.environ.get("EKD_DATA_ROOT")
    return Path(env or data_root or "data")


def load_cifar(dataset, split, data_root=None, label_mode="fine") -> LabeledImageSet:
    """Read the official CIFAR-10/100 binary files below ``data_root``."""
    root = resolve_data_root(data_root)
    if dataset == "cifar10":
        folder, names = root / CIFAR10_DIR, CIFAR10_FILES[split]
    elif dataset == "cifar100":
        folder, names = root / CIFAR100_DIR, CIFAR100_FILES[split]
    else:
        raise ValueError(f"unknown CIFAR dataset {dataset!r}")
    paths = [folder / n for n in names]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DatasetMissingError(
            f"{dataset} {split} split not found; expected {', '.join(missing)} "
            f"(set EKD_DATA_ROOT or data_root to the directory containing {folder.name}/)"
        )
    if dataset == "cifar10":
        parts = [parse_cifar10(p.read_bytes(), split) for p in paths]
    else:
        parts = [parse_cifar100(p.read_bytes(), label_mode, split) for p in paths]
    return concat(parts, split)


def stratified_indices(labels, num_classes, fraction, seed) -> np.ndarray:
    """Sorted indices keeping ``round(fraction * n_c)`` items of every class."""
    if not 0 < fraction <= 1:
        raise InfeasibleFractionError(f"fraction must lie in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    if fraction == 1:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        keep = int(round(fraction * members.size))
        if keep < 1:
            raise InfeasibleFractionError(
                f"class {c} has {members.size} items; fraction {fraction} keeps none"
            )
        chosen.append(rng.choice(members, size=keep, replace=False))
    return np.sort(np.concatenate(chosen))


def stratified_subsample(dataset: LabeledImageSet, fraction, seed) -> LabeledImageSet:
    if fraction == 1:
        return dataset
    idx = stratified_indices(dataset.labels, dataset.num_classes, fraction, seed)
    return dataset.take(idx)


def synthetic_blobs(
    num_classes,
    per_class,
    image_shape=(8, 8, 3),
    separation=5.0,
    seed=0,
    split_name="train",
    noise_std=1.0,
    means_seed=None,
) -> LabeledImageSet:
    """Gaussian class clusters rendered as images.

    Each class has a fixed random mean pattern of L2 norm ``separation``;
    samples add i.i.d. ``N(0, noise_std^2)`` pixel noise. ``means_seed``
    (defaults to ``seed``) lets a train and a test split share class means
    while drawing different noise.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    dim = int(np.prod(image_shape))
    mean_rng = np.random.default_rng(seed if means_seed is None else means_seed)
    directions = mean_rng.standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions

    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((labels.size, dim)) * noise_std
    images = (means[labels] + noise).reshape((labels.size,) + tuple(image_shape))
    return LabeledImageSet(images.astype(np.float32), labels, num_classes, split_name)


def quantize(dataset: LabeledImageSet, scale=32.0, offset=128.0) -> LabeledImageSet:
    """Map real-valued images to uint8 via ``clip(round(offset + scale * x))``."""
    pixels = np.clip(np.rint(offset + scale * dataset.images), 0, 255).astype(np.uint8)
    return LabeledImageSet(
        pixels, dataset.labels, dataset.num_classes, dataset.split_name, dataset.alt_labels
    )


def channel_stats(images):
    """Per-channel mean and std over an ``(N, H, W, C)`` array."""
    flat = np.asarray(images, dtype=np.float64).reshape(-1, images.shape[-1])
    std = flat.std(axis=0)
    std[std == 0] = 1.0
    return flat.mean(axis=0).astype(np.float32), std.astype(np.float32)


def normalize(images, mean, std):
    return ((np.asarray(images, dtype=np.float32) - mean) / std).astype(np.float32)


def _augment(images, rng, pad=4):
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, ::-1] if flip[i] else crop
    return out


def batch_iterator(
    dataset,
    batch_size,
    seed=0,
    epoch=0,
    augment=False,
    normalization=None,
    shuffle=True,
) -> Iterator[tuple]:
    """Yield ``(images, labels)`` numpy batches for one epoch.

    The permutation and every augmentation draw come from a generator seeded
    with ``(seed, epoch)``, so the sequence is a pure function of those
    arguments. Augmentation is a 4-pixel zero-pad random crop plus a random
    horizontal flip; normalization ``(mean, std)`` is applied afterwards.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    images = dataset.images if isinstance(dataset, LabeledImageSet) else dataset[0]
    labels = dataset.labels if isinstance(dataset, LabeledImageSet) else dataset[1]
    n = len(labels)
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb = images[idx]
        if augment:
            xb = _augment(xb, rng)
        if normalization is not None:
            xb = normalize(xb, *normalization)
        else:
            xb = np.asarray(xb, dtype=np.float32)
        yield xb, labels[idx]


def num_batches(n, batch_size):
    return -(-n // batch_size)
