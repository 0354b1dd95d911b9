"""Datasets: IDX and image-directory ingestion, normalization, batching.

Images are held as float arrays of shape [N, C, H, W]. Loaders return pixel
values scaled to [0, 1]; ``Dataset.normalized`` applies frozen per-channel
statistics.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .pnm import PnmError, read_pnm

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    code = "idx_error"


class IdxBadMagic(IdxError):
    code = "bad_magic"


class IdxCountMismatch(IdxError):
    code = "count_mismatch"


class IdxTruncated(IdxError):
    code = "truncated"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: tuple
    std: tuple

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    norm: NormStats | None = None
    class_names: list = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N,C,H,W], got {self.images.shape}")
        if not np.isfinite(self.images).all():
            raise DatasetError("images contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DatasetError("labels and images differ in count")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DatasetError("label outside [0, K)")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx],
                       labels=None if self.labels is None else self.labels[idx])

    def fit_norm(self) -> NormStats:
        m = self.images.mean(axis=(0, 2, 3))
        s = self.images.std(axis=(0, 2, 3))
        s = np.where(s > 0, s, 1.0)
        return NormStats(tuple(float(v) for v in m), tuple(float(v) for v in s))

    def normalized(self, stats: NormStats, dtype=np.float32) -> "Dataset":
        """Apply ``stats``; the dataset must hold raw [0, 1] pixels."""
        if self.norm is not None:
            raise DatasetError("dataset already normalized")
        m = np.asarray(stats.mean, dtype=np.float64)[None, :, None, None]
        s = np.asarray(stats.std, dtype=np.float64)[None, :, None, None]
        imgs = ((self.images - m) / s).astype(dtype)
        return replace(self, images=imgs, norm=stats)

    def value_range(self) -> tuple[float, float]:
        """Range of valid pixel values in the current (possibly normalized) space."""
        if self.norm is None:
            return 0.0, 1.0
        m = np.asarray(self.norm.mean)
        s = np.asarray(self.norm.std)
        return float(np.min(-m / s)), float(np.max((1 - m) / s))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# IDX


def _read_header(buf, path, magic, ndim):
    if len(buf) < 4:
        raise IdxTruncated(f"{path}: truncated header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxBadMagic(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(buf) < 4 + 4 * ndim:
        raise IdxTruncated(f"{path}: truncated header")
    return struct.unpack(">" + "I" * ndim, buf[4:4 + 4 * ndim])


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    n, h, w = _read_header(buf, path, IDX_IMAGES_MAGIC, 3)
    body = buf[16:]
    if len(body) < n * h * w:
        raise IdxTruncated(f"{path}: expected {n * h * w} pixel bytes, found {len(body)}")
    return np.frombuffer(body[: n * h * w], dtype=np.uint8).reshape(n, h, w).copy()


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    (n,) = _read_header(buf, path, IDX_LABELS_MAGIC, 1)
    body = buf[8:]
    if len(body) < n:
        raise IdxTruncated(f"{path}: expected {n} labels, found {len(body)}")
    return np.frombuffer(body[:n], dtype=np.uint8).copy()


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    for p in (images_path, labels_path):
        d = os.path.dirname(os.fspath(p))
        if d:
            os.makedirs(d, exist_ok=True)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    imgs = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(labels) != len(imgs):
        raise IdxCountMismatch(f"{len(imgs)} images but {len(labels)} labels")
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(imgs[:, None].astype(np.float32) / 255.0, labels.astype(np.int64), k)


def load_idx_dir(root, split: str = "train") -> Dataset:
    """Load ``<split>-images-idx3-ubyte`` / ``<split>-labels-idx1-ubyte`` from ``root``."""
    return load_idx(os.path.join(root, f"{split}-images-idx3-ubyte"),
                    os.path.join(root, f"{split}-labels-idx1-ubyte"))


# ---------------------------------------------------------------------------
# image directories

_IMAGE_EXTS = (".pgm", ".ppm", ".png")


def _decode_image(path) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm"):
        return read_pnm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ih, iw = img.shape[:2]
    rows = (np.arange(h) * ih) // h
    cols = (np.arange(w) * iw) // w
    return img[rows][:, cols]


def _coerce_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == channels:
        return img
    if channels == 1:
        return np.round(img.astype(np.float64).mean(axis=2, keepdims=True)).astype(np.uint8)
    return np.repeat(img[:, :, :1], channels, axis=2)


def load_image_dir(root, size=(28, 28), channels: int = 1) -> Dataset:
    """``root/<class>/<image>``; sorted class names define label ids."""
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise DatasetError(f"{root}: no class directories")
    images, labels, skipped = [], [], 0
    for label, cls in enumerate(classes):
        files = sorted(f for f in os.listdir(os.path.join(root, cls))
                       if f.lower().endswith(_IMAGE_EXTS))
        if not files:
            raise DatasetError(f"{root}/{cls}: empty class directory")
        for fname in files:
            try:
                img = _decode_image(os.path.join(root, cls, fname))
            except (PnmError, OSError, ValueError):
                skipped += 1
                continue
            img = _coerce_channels(_resize_nearest(img, *size), channels)
            images.append(img.transpose(2, 0, 1))
            labels.append(label)
    if skipped:
        logger.warning("skipped %d undecodable image(s) under %s", skipped, root)
    return Dataset(np.stack(images).astype(np.float32) / 255.0, np.asarray(labels), len(classes),
                   class_names=classes, skipped=skipped)


# ---------------------------------------------------------------------------
# batching


def batch_iterator(dataset: Dataset, batch_size: int, seed: int = 0,
                   shuffle: bool = True) -> Iterator[np.ndarray]:
    """Yield index arrays covering every sample once; the last batch may be partial."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def infinite_batches(dataset: Dataset, batch_size: int, seed: int = 0) -> Iterator[np.ndarray]:
    epoch = 0
    while True:
        yield from batch_iterator(dataset, batch_size, seed=seed * 100003 + epoch)
        epoch += 1


# ---------------------------------------------------------------------------
# desk-scale corpus


def make_digits_corpus(n_train: int = 8000, n_test: int = 2000, size: int = 28,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ten-class handwritten digit images at ``size``×``size``.

    Glyphs come from the 8×8 UCI digits bundled with scikit-learn. Each sample
    is an upscaled glyph (random scale and placement, light pixel noise) on a
    dark canvas. Train and test draw from disjoint glyph pools.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    glyphs = digits.images / 16.0
    targets = digits.target
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(glyphs))
    cut = int(0.6 * len(perm))
    pools = {"train": perm[:cut], "test": perm[cut:]}

    def render(pool, count):
        imgs = np.zeros((count, size, size), dtype=np.uint8)
        labels = np.zeros(count, dtype=np.uint8)
        for i in range(count):
            j = pool[rng.integers(len(pool))]
            scale = rng.uniform(0.55, 0.75) * size / 8.0
            g = np.clip(zoom(glyphs[j], scale, order=1), 0, 1)
            gh, gw = g.shape
            top = rng.integers(0, size - gh + 1)
            left = rng.integers(0, size - gw + 1)
            canvas = np.zeros((size, size))
            canvas[top:top + gh, left:left + gw] = g
            canvas += rng.normal(0, 0.04, canvas.shape)
            imgs[i] = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
            labels[i] = targets[j]
        return imgs, labels

    xtr, ytr = render(pools["train"], n_train)
    xte, yte = render(pools["test"], n_test)
    return xtr, ytr, xte, yte


def write_digits_corpus(root, **kwargs) -> None:
    xtr, ytr, xte, yte = make_digits_corpus(**kwargs)
    write_idx(os.path.join(root, "train-images-idx3-ubyte"),
              os.path.join(root, "train-labels-idx1-ubyte"), xtr, ytr)
    write_idx(os.path.join(root, "test-images-idx3-ubyte"),
              os.path.join(root, "test-labels-idx1-ubyte"), xte, yte)
