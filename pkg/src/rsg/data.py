"""Dataset construction, imbalance profiling, and batch sampling.

Two sources are supported: synthetic Gaussian class blobs (desk-scale
stand-in for imbalanced image benchmarks) and the public CIFAR-10 binary
layout (3073-byte records: one label byte, then 3072 pixel bytes in
R/G/B-plane row-major order).  Training splits are made imbalanced by
seeded per-class subsampling; validation splits are never touched.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FreqRareSplit, MiniBatch


class DatasetFormatError(ValueError):
    """Malformed dataset bytes or an unsatisfiable dataset request."""


@dataclass
class LabeledExample:
    """One sample: image (C, H, W) float64 and its class id.

    For pixel sources values lie in [0, 1]; synthetic feature sources store
    already-scaled values.
    """

    image: np.ndarray
    label: int


@dataclass
class DatasetSpec:
    """What to build: source, class count, and imbalance profile."""

    source: str = "synthetic-gaussian"
    n_cls: int = 4
    imbalance_type: str = "step"  # long-tailed | step | none
    rho: float = 1.0
    seed: int = 0
    n_max: int = 500
    # synthetic-gaussian knobs
    dim: int = 16
    class_sep: float = 3.0
    val_per_class: int = 100
    # cifar10-binary knobs
    data_dir: str = ""
    augment: bool = True

    def __post_init__(self):
        if self.source not in ("synthetic-gaussian", "cifar10-binary"):
            raise ValueError(f"unknown dataset source '{self.source}'")
        if self.imbalance_type not in ("long-tailed", "step", "none"):
            raise ValueError(f"unknown imbalance type '{self.imbalance_type}'")
        if self.rho < 1.0:
            raise ValueError(f"imbalance ratio must be >= 1, got {self.rho}")


@dataclass
class Dataset:
    train: list
    val: list
    n_cls: int
    train_counts: list
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None
    class_means: np.ndarray | None = None  # synthetic sources only


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def long_tailed_counts(n_max, rho, n_cls):
    """Geometric decay from n_max down to round(n_max / rho)."""
    if n_cls < 2:
        raise ValueError(f"long-tailed profile needs >= 2 classes, got {n_cls}")
    if n_max < 1 or rho < 1.0:
        raise ValueError("need n_max >= 1 and rho >= 1")
    return [
        max(1, _round_half_up(n_max * rho ** (-i / (n_cls - 1))))
        for i in range(n_cls)
    ]


def step_counts(n_max, rho, n_cls):
    """First half of the classes at n_max, second half at round(n_max / rho)."""
    if n_cls % 2 != 0:
        raise ValueError(f"step profile needs an even class count, got {n_cls}")
    if n_max < 1 or rho < 1.0:
        raise ValueError("need n_max >= 1 and rho >= 1")
    minority = max(1, _round_half_up(n_max / rho))
    return [n_max] * (n_cls // 2) + [minority] * (n_cls // 2)


def profile_counts(spec):
    if spec.imbalance_type == "none":
        return [spec.n_max] * spec.n_cls
    if spec.imbalance_type == "long-tailed":
        return long_tailed_counts(spec.n_max, spec.rho, spec.n_cls)
    return step_counts(spec.n_max, spec.rho, spec.n_cls)


def _near_square_factors(dim):
    h = int(math.isqrt(dim))
    while h > 1 and dim % h != 0:
        h -= 1
    return h, dim // h


def synth_gaussian_dataset(spec, dim=None, class_sep=None):
    """Isotropic unit-variance Gaussian blobs on seeded random directions.

    Class l's mean sits at distance class_sep from the origin; training
    counts follow the spec's imbalance profile while the validation split is
    balanced at val_per_class.  Images are reshaped to (1, h, w) with h * w
    = dim, as square as dim allows.
    """
    dim = spec.dim if dim is None else dim
    class_sep = spec.class_sep if class_sep is None else class_sep
    if dim < 1:
        raise ValueError(f"feature dimension must be >= 1, got {dim}")
    if class_sep <= 0:
        raise ValueError(f"class separation must be positive, got {class_sep}")
    h, w = _near_square_factors(dim)

    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 61]))
    dirs = rng.normal(size=(spec.n_cls, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = class_sep * dirs

    counts = profile_counts(spec)
    train, val = [], []
    for label in range(spec.n_cls):
        pts = means[label] + rng.normal(size=(counts[label], dim))
        train.extend(
            LabeledExample(p.reshape(1, h, w), label) for p in pts
        )
        pts = means[label] + rng.normal(size=(spec.val_per_class, dim))
        val.extend(
            LabeledExample(p.reshape(1, h, w), label) for p in pts
        )
    return Dataset(train=train, val=val, n_cls=spec.n_cls,
                   train_counts=counts, class_means=means)


# -- CIFAR-10 binary -----------------------------------------------------------

RECORD_BYTES = 3073
_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_TEST_FILE = "test_batch.bin"


def parse_cifar_file(path):
    """Parse one CIFAR-10 binary batch file into labeled [0, 1] images."""
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise DatasetFormatError(
            f"{path}: file length {len(raw)} is not a multiple of "
            f"{RECORD_BYTES}; incomplete record at byte offset {offset}"
        )
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = buf[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetFormatError(
            f"{path}: label byte {labels[bad[0]]} > 9 at byte offset "
            f"{bad[0] * RECORD_BYTES}"
        )
    images = buf[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return [LabeledExample(img, int(lab)) for img, lab in zip(images, labels)]


def serialize_example(example):
    """Inverse of parse_cifar_file for one record (exact for /255 pixels)."""
    pixels = np.round(example.image * 255.0).astype(np.uint8)
    return struct.pack("B", example.label) + pixels.tobytes()


def load_cifar10_binary(dir_path):
    """Load the five training batch files and the test batch from a directory."""
    d = Path(dir_path)
    missing = [f for f in _TRAIN_FILES + [_TEST_FILE] if not (d / f).exists()]
    if missing:
        raise DatasetFormatError(f"{d}: missing CIFAR-10 batch files {missing}")
    train = []
    for f in _TRAIN_FILES:
        train.extend(parse_cifar_file(d / f))
    val = parse_cifar_file(d / _TEST_FILE)
    counts = np.bincount([ex.label for ex in train], minlength=10)
    return Dataset(train=train, val=val, n_cls=10, train_counts=counts.tolist())


def channel_stats(examples):
    """Per-channel mean and std over every pixel of the given examples."""
    stacked = np.stack([ex.image for ex in examples])
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-8)


def make_imbalanced(data, counts, seed):
    """Seeded uniform per-class subsample without replacement."""
    labels = np.array([ex.label for ex in data])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    kept = []
    for label, want in enumerate(counts):
        idx = np.flatnonzero(labels == label)
        if want > idx.size:
            raise DatasetFormatError(
                f"class {label}: requested {want} samples but only "
                f"{idx.size} available"
            )
        chosen = rng.choice(idx, size=want, replace=False)
        kept.extend(int(i) for i in chosen)
    return [data[i] for i in kept]


def augment_pad_crop_flip(image, rng, pad=4):
    """Zero-pad, random crop back to size, and random horizontal flip."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, dy:dy + h, dx:dx + w]
    if rng.integers(0, 2):
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


class BatchSampler:
    """Seeded shuffled epochs over a list of examples.

    Each epoch reshuffles with a generator derived from (seed, epoch); the
    final short batch is kept.  Every batch carries the frequent/rare split
    and has the optional per-example transform applied.
    """

    def __init__(self, examples, batch_size, seed, split=None, transform=None):
        if batch_size < 2:
            raise ValueError(f"batch size must be >= 2, got {batch_size}")
        self.examples = list(examples)
        self.batch_size = batch_size
        self.seed = int(seed)
        self.split = split
        self.transform = transform
        self._labels = np.array([ex.label for ex in self.examples], dtype=np.int64)

    def batches_per_epoch(self):
        return math.ceil(len(self.examples) / self.batch_size)

    def epoch(self, epoch_index):
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 7919, int(epoch_index)]))
        order = rng.permutation(len(self.examples))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            if self.transform is None:
                images = np.stack([self.examples[i].image for i in idx])
            else:
                images = np.stack(
                    [self.transform(self.examples[i].image, rng) for i in idx])
            yield MiniBatch(x=images, labels=self._labels[idx], split=self.split)


def batch_sampler(data, batch_size, seed, split=None, transform=None):
    """Build the seeded epoch stream over ``data`` (see BatchSampler)."""
    return BatchSampler(data, batch_size, seed, split=split, transform=transform)


# -- flat tensor container (dataset caches, checkpoints) -------------------------

MAGIC = b"RSGTNSR1"


def save_array(path, arr):
    """Write one array as little-endian float32 with an 8-byte magic and shape."""
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_array(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:8]!r}")
    ndim = struct.unpack("<I", raw[8:12])[0]
    shape = struct.unpack(f"<{ndim}I", raw[12:12 + 4 * ndim])
    data = np.frombuffer(raw[12 + 4 * ndim:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DatasetFormatError(
            f"{path}: payload holds {data.size} floats, header says {shape}")
    return data.reshape(shape).astype(np.float64)


def build_dataset(spec):
    """Materialize a DatasetSpec: synthetic generation or CIFAR-10 ingestion."""
    if spec.source == "synthetic-gaussian":
        return synth_gaussian_dataset(spec)
    full = load_cifar10_binary(spec.data_dir)
    counts = profile_counts(spec)
    if spec.n_cls != 10:
        raise ValueError("cifar10-binary source requires n_cls == 10")
    train = make_imbalanced(full.train, counts, spec.seed)
    mean, std = channel_stats(train)
    return Dataset(train=train, val=full.val, n_cls=10, train_counts=counts,
                   channel_mean=mean, channel_std=std)
