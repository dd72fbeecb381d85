"""Dataset container IO, stratified splits, batching, synthetic blobs.

On-disk layout (little-endian throughout):

* images  ``<prefix>.bkei`` — magic ``BKEI``, u32 version=1, u32 count,
  u32 height, u32 width, then count*H*W u8 pixels row-major; pixel ``p``
  maps to the float ``p/255``.
* labels  ``<prefix>.bkel`` — magic ``BKEL``, u32 version=1, u32 count,
  count u8 labels.
* split manifest ``<prefix>.split.json`` — ``{seed, fraction, train, test}``.

Class names are an in-memory convenience only; the files carry none, so
a read-back container gets generic names.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import substream

IMAGES_MAGIC = b"BKEI"
LABELS_MAGIC = b"BKEL"
CONTAINER_VERSION = 1
IMAGES_SUFFIX = ".bkei"
LABELS_SUFFIX = ".bkel"
SPLIT_SUFFIX = ".split.json"


class ContainerError(ValueError):
    pass


@dataclass
class DatasetContainer:
    """images: (N, 1, H, W) float64 in [0,1], quantized to 1/255 steps."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ContainerError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContainerError(
                f"count mismatch: {len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and not (
            0 <= int(self.labels.min()) and int(self.labels.max()) < len(self.class_names)
        ):
            raise ContainerError("labels out of range for class_names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _quantize(images: np.ndarray) -> np.ndarray:
    if images.min() < 0.0 or images.max() > 1.0:
        raise ContainerError("pixel values must lie in [0, 1]")
    return np.rint(images * 255.0).astype(np.uint8)


def images_path(prefix) -> Path:
    return Path(str(prefix) + IMAGES_SUFFIX)


def labels_path(prefix) -> Path:
    return Path(str(prefix) + LABELS_SUFFIX)


def split_path(prefix) -> Path:
    return Path(str(prefix) + SPLIT_SUFFIX)


def write_container(container: DatasetContainer, prefix) -> None:
    pixels = _quantize(container.images)
    n, _, h, w = container.images.shape
    with open(images_path(prefix), "wb") as fh:
        fh.write(IMAGES_MAGIC)
        fh.write(struct.pack("<IIII", CONTAINER_VERSION, n, h, w))
        fh.write(pixels.tobytes())
    labels = container.labels.astype(np.uint8)
    with open(labels_path(prefix), "wb") as fh:
        fh.write(LABELS_MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, n))
        fh.write(labels.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_container(prefix, class_names: tuple[str, ...] | None = None) -> DatasetContainer:
    ipath = images_path(prefix)
    lpath = labels_path(prefix)
    with open(ipath, "rb") as fh:
        if _read_exact(fh, 4, "images header") != IMAGES_MAGIC:
            raise ContainerError(f"{ipath}: bad magic")
        version, count, h, w = struct.unpack("<IIII", _read_exact(fh, 16, "images header"))
        if version != CONTAINER_VERSION:
            raise ContainerError(f"{ipath}: unsupported version {version}")
        raw = _read_exact(fh, count * h * w, "images payload")
        if fh.read(1):
            raise ContainerError(f"{ipath}: trailing bytes")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, h, w) / 255.0

    with open(lpath, "rb") as fh:
        if _read_exact(fh, 4, "labels header") != LABELS_MAGIC:
            raise ContainerError(f"{lpath}: bad magic")
        version, label_count = struct.unpack("<II", _read_exact(fh, 8, "labels header"))
        if version != CONTAINER_VERSION:
            raise ContainerError(f"{lpath}: unsupported version {version}")
        if label_count != count:
            raise ContainerError(
                f"count mismatch: {count} images but {label_count} labels"
            )
        labels = np.frombuffer(_read_exact(fh, count, "labels payload"), dtype=np.uint8)
        if fh.read(1):
            raise ContainerError(f"{lpath}: trailing bytes")

    labels = labels.astype(np.int64)
    if class_names is None:
        k = int(labels.max()) + 1 if count else 1
        class_names = tuple(f"class{i}" for i in range(k))
    return DatasetContainer(images=images, labels=labels, class_names=class_names)


# --- splits and batching ----------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    fraction: float
    seed: int

    def __post_init__(self) -> None:
        overlap = set(self.train_indices) & set(self.test_indices)
        if overlap:
            raise ContainerError(f"train/test overlap: {sorted(overlap)[:5]}...")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _indices_by_class(labels: np.ndarray) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for idx, lbl in enumerate(labels):
        groups.setdefault(int(lbl), []).append(idx)
    return groups


def stratified_subsample(labels: np.ndarray, fraction: float, seed: int) -> list[int]:
    """Per class, a seeded uniform subset of round(fraction * n_c), min 1."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(range(len(labels)))
    chosen: list[int] = []
    for cls, members in sorted(_indices_by_class(labels).items()):
        if not members:
            raise ValueError(f"class {cls} is empty")
        k = max(1, _round_half_up(fraction * len(members)))
        pool = list(members)
        substream(seed, "subsample", cls).shuffle(pool)
        chosen.extend(sorted(pool[:k]))
    return sorted(chosen)


def stratified_split(labels: np.ndarray, test_per_class: int, seed: int) -> SplitSpec:
    """Deterministic per-class split holding out test_per_class samples."""
    if test_per_class < 1:
        raise ValueError("test_per_class must be >= 1")
    train: list[int] = []
    test: list[int] = []
    for cls, members in sorted(_indices_by_class(labels).items()):
        if len(members) <= test_per_class:
            raise ValueError(
                f"class {cls} has {len(members)} samples, cannot hold out {test_per_class}"
            )
        pool = list(members)
        substream(seed, "split", cls).shuffle(pool)
        test.extend(pool[:test_per_class])
        train.extend(pool[test_per_class:])
    return SplitSpec(
        train_indices=tuple(sorted(train)),
        test_indices=tuple(sorted(test)),
        fraction=1.0,
        seed=seed,
    )


def write_split(split: SplitSpec, path) -> None:
    doc = {
        "seed": split.seed,
        "fraction": split.fraction,
        "train": list(split.train_indices),
        "test": list(split.test_indices),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def read_split(path) -> SplitSpec:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return SplitSpec(
            train_indices=tuple(int(i) for i in doc["train"]),
            test_indices=tuple(int(i) for i in doc["test"]),
            fraction=float(doc["fraction"]),
            seed=int(doc["seed"]),
        )
    except KeyError as exc:
        raise ContainerError(f"split manifest {path} missing key {exc}") from None


def batches(indices, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffle once per (seed, epoch), then chunk; the short tail is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = [int(i) for i in indices]
    substream(seed, "shuffle", epoch).shuffle(order)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


# --- synthetic desk-scale dataset -------------------------------------------

SYNTH_CLASS_NAMES = ("blob_upper_left", "blob_lower_right")
_BLOB_CENTERS = (0.3, 0.7)  # fractional (row, col) center per class
_BLOB_AMPLITUDE = 0.75
_NOISE_MAX = 0.15


def synth_blobs(n_per_class: int, side: int, seed: int) -> DatasetContainer:
    """Two linearly separable classes: a bright Gaussian blob in the
    upper-left (class 0) or lower-right (class 1) corner plus uniform
    noise, jittered a little so views of the same class still differ."""
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = substream(seed, "synth")
    sigma = side / 6.0
    jitter = side / 16.0
    rows = np.arange(side)[:, None]
    cols = np.arange(side)[None, :]

    images = np.empty((2 * n_per_class, 1, side, side))
    labels = np.empty(2 * n_per_class, dtype=np.int64)
    for i in range(2 * n_per_class):
        cls = i // n_per_class
        center = _BLOB_CENTERS[cls] * side
        cy = center + rng.uniform(-jitter, jitter)
        cx = center + rng.uniform(-jitter, jitter)
        blob = _BLOB_AMPLITUDE * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma**2))
        noise = np.empty((side, side))
        for r in range(side):
            for c in range(side):
                noise[r, c] = rng.uniform(0.0, _NOISE_MAX)
        images[i, 0] = np.clip(blob + noise, 0.0, 1.0)
        labels[i] = cls
    images = _quantize(images) / 255.0
    return DatasetContainer(images=images, labels=labels, class_names=SYNTH_CLASS_NAMES)
