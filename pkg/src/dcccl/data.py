"""Synthetic labeled images, the on-disk dataset format and class-skew partitioning.

Dataset file layout (little-endian)::

    magic   4 bytes  b"DCDS"
    version u32      (1)
    classes u32
    count   u64
    C, H, W u32 each
    then per sample: label u32, C*H*W float64 values (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

MAGIC = b"DCDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIQIII")


class DatasetFormatError(ValueError):
    pass


class MalformedHeaderError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = ""
    ids: Optional[np.ndarray] = None  # sample identities, stable across partitioning

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be [N,C,H,W] with one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx, name: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes,
                              name or self.name, self.ids[idx])

    def concat(self, other: "LabeledDataset", name: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(np.concatenate([self.images, other.images]),
                              np.concatenate([self.labels, other.labels]), self.num_classes,
                              name or self.name, np.concatenate([self.ids, other.ids]))


@dataclass
class PartitionedDataset:
    cloud_train: LabeledDataset
    device_train: LabeledDataset
    test: LabeledDataset
    device_classes: frozenset
    augment_fraction: float
    device_original_size: int = 0
    augment_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def full_train(self) -> LabeledDataset:
        """Cloud split plus the original (un-augmented) device split."""
        dev = self.device_train.subset(np.arange(self.device_original_size))
        return self.cloud_train.concat(dev, name="full")


# ---------------------------------------------------------------------------
# synthetic generator


def class_template(c: int, num_classes: int, image_size: int, channels: int) -> np.ndarray:
    """Oriented grating whose orientation and frequency are indexed by the class."""
    n_orient = (num_classes + 1) // 2
    theta = np.pi * (c % n_orient) / n_orient
    freq = 2.0 + 1.5 * (c // n_orient)  # cycles across the image
    y, x = np.mgrid[0:image_size, 0:image_size] / image_size
    proj = x * np.cos(theta) + y * np.sin(theta)
    t = np.stack([np.cos(2 * np.pi * freq * proj + np.pi * k / max(channels, 1))
                  for k in range(channels)])
    return t / np.sqrt((t * t).mean())


def generate_synthetic(num_classes: int = 10, samples_per_class: int = 100, image_size: int = 12,
                       channels: int = 1, noise_std: float = 1.0, seed: int = 0,
                       max_shift: Optional[int] = None, name: str = "synthetic") -> LabeledDataset:
    """Class templates under a random circular shift plus Gaussian pixel noise.

    ``max_shift`` defaults to ``image_size // 2``; with ``max_shift=0`` and
    ``noise_std=0`` all samples of a class are identical.
    """
    if min(num_classes, samples_per_class, image_size, channels) < 1 or noise_std < 0:
        raise ValueError("counts must be positive and noise_std non-negative")
    if max_shift is None:
        max_shift = image_size // 2
    rng = np.random.default_rng(seed)
    templates = [class_template(c, num_classes, image_size, channels) for c in range(num_classes)]
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = np.empty((len(labels), channels, image_size, image_size))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(labels), 2)) if max_shift else \
        np.zeros((len(labels), 2), dtype=np.int64)
    noise = rng.standard_normal(images.shape)
    for i, (c, (dy, dx)) in enumerate(zip(labels, shifts)):
        images[i] = np.roll(templates[c], (int(dy), int(dx)), axis=(1, 2))
    images += noise_std * noise
    order = rng.permutation(len(labels))
    return LabeledDataset(images[order], labels[order], num_classes, name)


def make_splits(num_classes=10, samples_per_class=100, test_per_class=50, image_size=12,
                channels=1, noise_std=1.0, seed=0, max_shift=None) -> tuple[LabeledDataset, LabeledDataset]:
    """Independent train and test draws from the same class templates."""
    ss = np.random.SeedSequence(seed).spawn(2)
    kw = dict(num_classes=num_classes, image_size=image_size, channels=channels,
              noise_std=noise_std, max_shift=max_shift)
    train = generate_synthetic(samples_per_class=samples_per_class, seed=ss[0], name="train", **kw)
    test = generate_synthetic(samples_per_class=test_per_class, seed=ss[1], name="test", **kw)
    return train, test


# ---------------------------------------------------------------------------
# file format


def save_dataset(ds: LabeledDataset, path) -> None:
    c, h, w = ds.sample_shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, ds.num_classes, len(ds), c, h, w))
        row = np.dtype("<f8")
        for img, lab in zip(ds.images, ds.labels):
            f.write(struct.pack("<I", int(lab)))
            f.write(img.astype(row, copy=False).tobytes())


def load_dataset(path) -> LabeledDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, k, n, c, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if k < 1 or min(c, h, w) < 1:
        raise MalformedHeaderError(f"{path}: non-positive class count or sample shape")
    per = 4 + 8 * c * h * w
    if len(buf) - _HEADER.size < n * per:
        raise TruncatedPayloadError(f"{path}: expected {n} samples ({n * per} bytes), "
                                    f"found {len(buf) - _HEADER.size} bytes")
    if len(buf) - _HEADER.size > n * per:
        raise MalformedHeaderError(f"{path}: trailing bytes after {n} samples")
    rec = np.dtype([("label", "<u4"), ("x", "<f8", (c, h, w))])
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=_HEADER.size)
    labels = arr["label"].astype(np.int64)
    if n and labels.max() >= k:
        raise LabelRangeError(f"{path}: label {labels.max()} out of range for {k} classes")
    return LabeledDataset(arr["x"].astype(np.float64), labels, k, Path(path).stem)


# ---------------------------------------------------------------------------
# partitioning


def partition_by_class(full: LabeledDataset, device_classes: Iterable[int], augment_fraction: float = 0.0,
                       seed: int = 0, test: Optional[LabeledDataset] = None) -> PartitionedDataset:
    """Device gets the samples of ``device_classes``, the cloud the rest.

    Up to ``floor(augment_fraction * |device|)`` cloud samples are drawn
    uniformly without replacement and appended to the device split; they also
    stay in the cloud split.
    """
    dev_cls = frozenset(int(c) for c in device_classes)
    if not dev_cls or len(dev_cls) >= full.num_classes:
        raise PartitionError("device_classes must be a proper, non-empty subset of the classes")
    if not dev_cls <= set(range(full.num_classes)):
        raise PartitionError(f"device classes {sorted(dev_cls)} outside [0, {full.num_classes})")
    if not 0 <= augment_fraction <= 0.1:
        raise PartitionError("augment_fraction must lie in [0, 0.1]")
    on_dev = np.isin(full.labels, sorted(dev_cls))
    cloud = full.subset(np.flatnonzero(~on_dev), "cloud_train")
    device = full.subset(np.flatnonzero(on_dev), "device_train")
    n_aug = min(int(np.floor(augment_fraction * len(device) + 1e-9)), len(cloud))
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(cloud), size=n_aug, replace=False)) if n_aug else np.zeros(0, np.int64)
    aug = cloud.subset(pick)
    device_aug = device.concat(aug, "device_train")
    return PartitionedDataset(cloud, device_aug, test if test is not None else full, dev_cls,
                              augment_fraction, len(device), aug.ids.copy())
