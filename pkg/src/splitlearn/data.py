"""Synthetic image tasks, 75/25 partitioning, client sharding and augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .chain import Task
from .protocol import _Reader, encode_tensor

N_LABELS = 5
LABEL_PREVALENCE = 0.3
VALIDATION_FRACTION = 0.25


@dataclass(frozen=True)
class Dataset:
    task: Task
    images: np.ndarray        # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray        # (N,) or (N, 5) float32 in {0, 1}
    subject_ids: np.ndarray   # (N,) int64, unique

    def __len__(self):
        return len(self.images)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.task == other.task and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.subject_ids, other.subject_ids))

    __hash__ = None


def _bump(h, w, cy, cx, radius):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))


def _binary_images(labels, size, noise, amplitude, rng):
    n = len(labels)
    h = w = size
    base = 0.3 + noise * rng.standard_normal((n, 1, h, w))
    radius = size / 10
    margin = size / 4
    for i in np.flatnonzero(labels):
        cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
        base[i, 0] += amplitude * _bump(h, w, cy, cx, radius)
    return base


def _motifs(size: int) -> np.ndarray:
    """Five fixed spatial patterns: corner blob, horizontal bar, vertical bar, ring, gradient."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    corner = _bump(h, w, size * 0.2, size * 0.2, size / 10)
    hbar = np.exp(-((yy - size * 0.7) ** 2) / (2 * (size / 16) ** 2)) * ((xx > size * 0.15) & (xx < size * 0.85))
    vbar = np.exp(-((xx - size * 0.7) ** 2) / (2 * (size / 16) ** 2)) * ((yy > size * 0.15) & (yy < size * 0.85))
    r = np.hypot(yy - size / 2, xx - size / 2)
    ring = np.exp(-((r - size * 0.3) ** 2) / (2 * (size / 20) ** 2))
    gradient = xx / (w - 1)
    return np.stack([corner, hbar, vbar, ring, gradient])


def _multilabel_images(labels, size, noise, amplitude, rng):
    """Present motifs are added with a random shift of up to size // 8 pixels per axis."""
    n = len(labels)
    motifs = _motifs(size)
    jitter = max(1, size // 8)
    base = 0.3 + noise * rng.standard_normal((n, 1, size, size))
    shifts = rng.integers(-jitter, jitter + 1, size=(n, N_LABELS, 2))
    for i, k in zip(*np.nonzero(labels)):
        base[i, 0] += amplitude * np.roll(motifs[k], tuple(shifts[i, k]), axis=(0, 1))
    return base


def synthesize(task: Task, n: int, image_size: int = 16, seed: int = 0, noise: float = 0.2,
               amplitude: float | None = None) -> Dataset:
    """Deterministic synthetic stand-in for the fundus/radiograph datasets.

    Binary: positives carry one bright Gaussian blob at a random interior
    position; class counts differ by at most one. MultiLabel: each of five
    motifs is present independently with probability 0.3.
    """
    if n < 8:
        raise ValueError(f"need n >= 8 samples, got {n}")
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    if task is Task.BINARY:
        labels = rng.permutation(np.arange(n) % 2).astype(np.float32)
        images = _binary_images(labels, image_size, noise, 0.5 if amplitude is None else amplitude, rng)
    else:
        labels = (rng.random((n, N_LABELS)) < LABEL_PREVALENCE).astype(np.float32)
        images = _multilabel_images(labels, image_size, noise, 0.35 if amplitude is None else amplitude, rng)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(task, images, labels, np.arange(n, dtype=np.int64))


def blob_probe_feature(images: np.ndarray, window: int) -> np.ndarray:
    """Brightest local mean over ``window``-sized boxes, one value per image."""
    local = ndimage.uniform_filter(images[:, 0].astype(np.float64), size=(1, window, window), mode="constant")
    return local.reshape(len(images), -1).max(axis=1)


# --------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionPlan:
    train: tuple[tuple[int, ...], ...]   # per client
    validation: tuple[int, ...]
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.train)

    def all_train(self) -> list[int]:
        """Every training index, concatenated in client order."""
        return [i for shard in self.train for i in shard]


def partition(dataset_or_n, n_clients: int, seed: int) -> PartitionPlan:
    """Random 75/25 split by subject, then round-robin dealing of the training cohort."""
    n = dataset_or_n if isinstance(dataset_or_n, int) else len(dataset_or_n)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    n_val = round(VALIDATION_FRACTION * n)
    if n - n_val < n_clients:
        raise ValueError(f"{n_clients} clients but only {n - n_val} training samples")
    perm = np.random.default_rng(seed).permutation(n)
    validation = tuple(int(i) for i in perm[:n_val])
    train = perm[n_val:]
    shards = tuple(tuple(int(i) for i in train[c::n_clients]) for c in range(n_clients))
    return PartitionPlan(shards, validation, seed)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    rotation: bool = False
    lateral_flip_prob: float = 0.5
    axial_flip_prob: float = 0.5

    def __post_init__(self):
        for p in (self.lateral_flip_prob, self.axial_flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")

    @property
    def active(self) -> bool:
        return self.rotation or self.lateral_flip_prob > 0 or self.axial_flip_prob > 0


NO_AUGMENT = AugmentSpec(rotation=False, lateral_flip_prob=0.0, axial_flip_prob=0.0)


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a (C, H, W) image about its centre; bilinear, zero padding."""
    if degrees % 360 == 0:
        return image.copy()
    out = ndimage.rotate(image, degrees, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0,
                         prefilter=False)
    return out.astype(image.dtype)


def augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random lateral/axial inversion and rotation of one (C, H, W) image. Labels are never touched."""
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    lateral, axial, angle = rng.random(), rng.random(), rng.uniform(0.0, 360.0)
    out = image
    if lateral < spec.lateral_flip_prob:
        out = out[:, :, ::-1]
    if axial < spec.axial_flip_prob:
        out = out[:, ::-1, :]
    if spec.rotation:
        out = rotate_image(np.ascontiguousarray(out), angle)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    if not spec.active:
        return images
    return np.stack([augment(img, spec, rng) for img in images])


# --------------------------------------------------------------------------
# flat binary export: b"SPLD", u8 version, u8 task, images tensor, labels tensor, u32 n, n x u32 ids


_DATA_MAGIC = b"SPLD"
_TASK_CODES = {Task.BINARY: 0, Task.MULTILABEL: 1}


def export_dataset(dataset: Dataset, path) -> None:
    blob = b"".join([
        _DATA_MAGIC, struct.pack("<BB", 1, _TASK_CODES[dataset.task]),
        encode_tensor(dataset.images), encode_tensor(dataset.labels),
        struct.pack("<I", len(dataset)), dataset.subject_ids.astype("<u4").tobytes(),
    ])
    with open(path, "wb") as fh:
        fh.write(blob)


def import_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, task_code = struct.unpack_from("<BB", blob, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    r = _Reader(blob[6:])
    images, labels = r.tensor(), r.tensor()
    n = r.u32()
    ids = np.frombuffer(bytes(r.take(4 * n)), dtype="<u4").astype(np.int64)
    r.done()
    task = {v: k for k, v in _TASK_CODES.items()}[task_code]
    return Dataset(task, images, labels, ids)
