"""Dataset ingestion: IDX files, synthetic blobs, subsetting and batching"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from exceptions import ConfigurationError, DimensionError, DomainError, FormatError, LengthError, RangeError
from models import DataSection

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

SPLIT_STREAMS = {"train": 1, "test": 2}


@dataclass(frozen=True)
class Dataset:
    """Immutable images [N, C, H, W] in [0, 1] with integer labels in [0, k)"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DimensionError("dataset", self.images.shape, self.labels.shape)
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DomainError("pixels outside [0, 1]", details={"split": self.split})
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels outside [0, {self.num_classes})", details={"split": self.split})
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, indices: np.ndarray, **provenance) -> "Dataset":
        prov = dict(self.provenance)
        prov.update(provenance)
        return Dataset(images=self.images[indices], labels=self.labels[indices],
                       num_classes=self.num_classes, split=self.split, provenance=prov)


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise ConfigurationError(f"dataset file not found: {path}", details={"path": path})
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(path, f"corrupt gzip stream: {e}")
    return raw


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise LengthError(path, 4, len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(path, f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}",
                          details={"observed": magic, "expected": expected_magic})
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(path, header, len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise LengthError(path, header + count, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: str, split: str = "train", num_classes: int = 10) -> Dataset:
    """Big-endian IDX image/label pair; pixels scaled by 1/255, gzip detected by magic"""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(labels_path, f"{labels.shape[0]} labels for {images.shape[0]} images")
    if labels.size and int(labels.max()) >= num_classes:
        raise FormatError(labels_path, f"label {int(labels.max())} outside {num_classes} classes",
                          details={"observed": int(labels.max()), "num_classes": num_classes})
    logger.info(f"Loaded {images.shape[0]} {split} samples from {images_path}")
    return Dataset(
        images=images.astype(np.float64)[:, None, :, :] / 255.0,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        split=split,
        provenance={"source": "idx", "images": images_path, "labels": labels_path},
    )


def synth_blobs(k: int, n_per_class: int, shape: Sequence[int], spread: float, seed: int = 0,
                split: str = "train") -> Dataset:
    """Gaussian blobs around k random class centers, clipped to [0, 1] and shuffled.

    Centers depend only on `seed`, so train and test splits share classes.
    """
    if k < 2:
        raise ConfigurationError(f"synthetic data needs at least 2 classes, got {k}", details={"field": "num_classes"})
    shape = tuple(int(s) for s in shape)
    centers = np.random.default_rng([seed, 0]).uniform(0.0, 1.0, size=(k,) + shape)
    rng = np.random.default_rng([seed, SPLIT_STREAMS.get(split, 3)])
    labels = np.repeat(np.arange(k), n_per_class)
    images = centers[labels] + spread * rng.standard_normal((labels.shape[0],) + shape)
    order = rng.permutation(labels.shape[0])
    return Dataset(
        images=np.clip(images[order], 0.0, 1.0),
        labels=labels[order].astype(np.int64),
        num_classes=k,
        split=split,
        provenance={"source": "synthetic", "seed": seed, "spread": spread, "n_per_class": n_per_class},
    )


def subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """n samples drawn without replacement in a seed-determined order"""
    if n > len(ds):
        raise RangeError(f"subset of {n} requested from {len(ds)} samples", details={"n": n, "available": len(ds)})
    picked = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds.take(picked, subset_seed=seed, subset_size=n)


def batches(ds: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0,
            epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(images, labels, indices) per batch; the order for a shuffled epoch is permutation(seed, epoch)"""
    order = np.random.default_rng([seed, epoch]).permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx], idx


def load_datasets(section: DataSection, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Training and held-out splits described by a run configuration"""
    if section.source == "synthetic":
        syn = section.synthetic
        train = synth_blobs(syn.num_classes, syn.n_per_class, syn.image_shape, syn.spread, seed, "train")
        test = synth_blobs(syn.num_classes, syn.eval_per_class, syn.image_shape, syn.spread, seed, "test")
        return train, test
    train = load_idx(section.train_images, section.train_labels, split="train")
    test = load_idx(section.test_images, section.test_labels, split="test", num_classes=train.num_classes)
    if section.train_size is not None and section.train_size < len(train):
        train = subset(train, section.train_size, seed)
    if section.eval_size is not None and section.eval_size < len(test):
        test = subset(test, section.eval_size, seed)
    return train, test
