"""Dataset loading (IDX, CIFAR-10 binary, synthetic blobs) and batch iteration."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES, IDX_LABELS = 0x00000803, 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS = 10000


@dataclass
class Dataset:
    images: np.ndarray            # [n, C, H, W] (or [n, dim]) float32 in [0, 1]
    labels: np.ndarray            # [n] int64
    classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    kind: str = "synthetic"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels", "data-io")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise FormatError(f"labels outside [0, {self.classes})", "data-io")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.mean, self.std, self.kind)

    def channel_stats(self):
        """Per-channel mean/std (axis 1 is the channel axis for image data)."""
        x = self.images
        axes = tuple(i for i in range(x.ndim) if i != 1) if x.ndim == 4 else (0, 1)
        mean = x.mean(axis=axes, dtype=np.float64)
        std = x.std(axis=axes, dtype=np.float64)
        return np.atleast_1d(mean).astype(np.float32), np.atleast_1d(std).astype(np.float32)

    def normalize(self, mean=None, std=None):
        """Standardize per channel. Defaults to this dataset's own statistics."""
        if mean is None or std is None:
            mean, std = self.channel_stats()
        mean = np.asarray(mean, dtype=np.float32)
        std = np.asarray(std, dtype=np.float32)
        std = np.where(std > 0, std, 1).astype(np.float32)
        if self.images.ndim == 4:
            shape = (1, -1, 1, 1)
        else:
            shape = (1, -1) if mean.size > 1 else (1, 1)
        x = (self.images - mean.reshape(shape)) / std.reshape(shape)
        return Dataset(x.astype(np.float32), self.labels, self.classes, mean, std, self.kind)


# ---------------------------------------------------------------------------
# IDX (MNIST-style)


def _read(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}", "data-io") from None


def _parse_idx(buf, path, magic):
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header", "data-io")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", "data-io")
    ndim = buf[3]
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"{path}: truncated header", "data-io")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    need = int(np.prod(dims))
    if len(buf) - head < need:
        raise FormatError(f"{path}: truncated data, expected {need} bytes, found {len(buf) - head}",
                          "data-io")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(images_path, labels_path, classes=10):
    """Read an IDX image/label file pair; pixels scaled to [0, 1], shape [n, 1, H, W]."""
    images = _parse_idx(_read(images_path), images_path, IDX_IMAGES)
    labels = _parse_idx(_read(labels_path), labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", "data-io")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), classes, kind="idx")


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images [n, H, W] and labels [n] as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES) + struct.pack(f">{images.ndim}I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS, labels.shape[0]) + labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def load_cifar10_binary(paths, records=CIFAR_RECORDS):
    """Read CIFAR-10 binary batch files (label byte + 3072 channel-major pixels per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        buf = _read(path)
        if len(buf) != records * CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(buf)} bytes, expected {records} records of "
                              f"{CIFAR_RECORD} bytes", "data-io")
        raw = np.frombuffer(buf, dtype=np.uint8).reshape(records, CIFAR_RECORD)
        labels = raw[:, 0]
        if labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise FormatError(f"{path}: label {labels[bad]} out of range in record {bad}", "data-io")
        xs.append(raw[:, 1:].reshape(records, 3, 32, 32))
        ys.append(labels)
    x = np.concatenate(xs).astype(np.float32) / 255.0
    return Dataset(x, np.concatenate(ys).astype(np.int64), 10, kind="cifar")


def write_cifar10_binary(images, labels, path):
    """Inverse of ``load_cifar10_binary`` for uint8 images [n, 3, 32, 32]."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def synth_blobs(n, classes, dim, seed, spread=1.0, noise=1.0, shape=None):
    """Gaussian clusters with seeded means, clipped to [0, 1] after an affine squash.

    Labels cycle through the classes, so the histogram is balanced within 1.
    ``spread`` scales the distance between class means relative to ``noise``.
    ``shape`` optionally reshapes each sample (e.g. ``(1, 28, 28)`` with dim 784).
    """
    if classes < 2:
        raise ConfigError("synthetic data needs at least 2 classes", "data-io")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, spread, size=(classes, dim))
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    x = means[labels] + noise * rng.normal(0.0, 1.0, size=(n, dim))
    x = np.clip(0.5 + x / 8.0, 0.0, 1.0).astype(np.float32)
    if shape is not None:
        x = x.reshape((n,) + tuple(shape))
    return Dataset(x, labels.astype(np.int64), classes, kind="synthetic")


def synth_split(n_train, n_test, classes, dim, seed, **kw):
    """Train/test split drawn from the same clusters."""
    full = synth_blobs(n_train + n_test, classes, dim, seed, **kw)
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))


# ---------------------------------------------------------------------------
# batching


def epoch_rng(seed, epoch):
    return np.random.default_rng([int(seed), int(epoch)])


def augment(x, rng, pad=4):
    """Random ``pad``-pixel crop and horizontal flip per image of ``x[B, C, H, W]``."""
    b, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=b)
    dx = rng.integers(0, 2 * pad + 1, size=b)
    flip = rng.random(b) < 0.5
    out = np.empty_like(x)
    for i in range(b):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def batches(dataset, partial_set, batch_size, epoch_seed, augment_images=False):
    """Yield ``(images, labels, indices)`` over a seeded permutation of ``partial_set``.

    Full batches come first, then one ragged tail if the size does not divide.
    ``epoch_seed`` is ``(run_seed, epoch)`` or an int.
    """
    if batch_size <= 0:
        raise ConfigError("batch size must be positive", "data-io")
    seed = epoch_seed if isinstance(epoch_seed, (tuple, list)) else (epoch_seed, 0)
    rng = epoch_rng(*seed)
    idx = np.asarray(partial_set, dtype=np.int64)
    idx = idx[rng.permutation(idx.size)]
    for start in range(0, idx.size, batch_size):
        sel = idx[start:start + batch_size]
        x = dataset.images[sel]
        if augment_images and x.ndim == 4:
            x = augment(x, rng)
        yield x, dataset.labels[sel], sel
