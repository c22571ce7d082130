"""Synthetic datasets, single-stage Haar wavelet transform and dataset files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import GaussianClassModel

MAGIC = b"DCDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")  # magic, version, count, classes, channels, H, W


class DataError(Exception):
    """Malformed, missing or inconsistent dataset input."""


@dataclass
class Dataset:
    images: np.ndarray  # (count, channels, H, W) float32
    labels: np.ndarray  # (count,) int64
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (count, channels, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if not np.all(np.isfinite(self.images)):
            raise DataError("images contain non-finite values")
        c = self.num_classes
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= c):
            raise DataError(f"labels outside [0, {c})")
        self.metadata.setdefault("class_counts", np.bincount(self.labels, minlength=c).tolist())

    @property
    def num_classes(self) -> int:
        names = self.metadata.get("class_names")
        if names:
            return len(names)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        meta = {k: v for k, v in self.metadata.items() if k != "class_counts"}
        return Dataset(self.images[indices], self.labels[indices], meta)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.astype("<i4").tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# Generators
# --------------------------------------------------------------------------


def generate_gaussian_dataset(model: GaussianClassModel, n_per_class: int, seed: int,
                              clip: bool = False) -> Dataset:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(model.num_classes):
        draw = rng.standard_normal((n_per_class,) + model.sample_shape)
        images.append(model.means[c] + np.sqrt(model.variances[c]) * draw)
        labels.append(np.full(n_per_class, c))
    images = np.concatenate(images)
    if clip:
        images = np.clip(images, -1.0, 1.0)
    meta = {"generator": "gaussian", "seed": seed, "class_names": list(model.class_names),
            "oracle": model.to_dict(), "clipped": clip}
    return Dataset(images, np.concatenate(labels), meta)


def _soft_disc(dist: np.ndarray, radius: float, edge: float = 0.5) -> np.ndarray:
    """Anti-aliased indicator of dist <= radius, linear ramp of width ``edge`` px."""
    return np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)


def generate_shapes_dataset(resolution: int, n_per_class: int, seed: int,
                            background_noise: float = 0.15) -> Dataset:
    """Filled blobs (class 0) vs rings (class 1) on a dark, noisy background.

    Centre, outer radius and intensity come from the same ranges for both
    classes. Ring holes range from clearly visible down to sub-pixel, so a
    fraction of rings is genuinely hard to tell from a blob.
    """
    if resolution not in (8, 16, 32):
        raise ValueError("resolution must be one of 8, 16, 32")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64) + 0.5
    images = np.empty((2 * n_per_class, 1, r, r), dtype=np.float64)
    labels = np.repeat([0, 1], n_per_class)
    for i, label in enumerate(labels):
        cy, cx = rng.uniform(0.35 * r, 0.65 * r, size=2)
        outer = rng.uniform(0.2 * r, 0.34 * r)
        intensity = rng.uniform(0.4, 1.0)
        dist = np.hypot(yy - cy, xx - cx)
        mask = _soft_disc(dist, outer)
        if label == 1:
            hole = outer * rng.uniform(0.1, 0.6)
            mask = mask - _soft_disc(dist, hole)
        img = -1.0 + 2.0 * intensity * mask + background_noise * rng.standard_normal((r, r))
        images[i, 0] = np.clip(img, -1.0, 1.0)
    meta = {"generator": "shapes", "seed": seed, "resolution": r,
            "class_names": ["blob", "ring"], "background_noise": background_noise}
    return Dataset(images, labels, meta)


# --------------------------------------------------------------------------
# Haar wavelet
# --------------------------------------------------------------------------


def haar_dwt(images):
    """Orthonormal single-stage Haar analysis.

    (count, C, H, W) -> (count, 4C, H/2, W/2), subbands ordered
    (LL, LH, HL, HH) for each input channel in turn. LH is low-pass along
    width and high-pass along height. Works on numpy arrays and torch tensors.
    """
    h, w = images.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"Haar transform needs even height and width, got {h}x{w}")
    a = images[..., 0::2, 0::2]
    b = images[..., 0::2, 1::2]
    c = images[..., 1::2, 0::2]
    d = images[..., 1::2, 1::2]
    bands = [(a + b + c + d) / 2, (a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2]
    stack = torch.stack if isinstance(images, torch.Tensor) else np.stack
    out = stack(bands, 2)  # (count, C, 4, H/2, W/2)
    return out.reshape(out.shape[0], -1, h // 2, w // 2)


def haar_idwt(coeffs):
    """Inverse of :func:`haar_dwt`."""
    n, c4, h2, w2 = coeffs.shape
    if c4 % 4:
        raise ValueError("coefficient channels must be a multiple of 4")
    bands = coeffs.reshape(n, c4 // 4, 4, h2, w2)
    ll, lh, hl, hh = (bands[:, :, i] for i in range(4))
    if isinstance(coeffs, torch.Tensor):
        out = coeffs.new_empty((n, c4 // 4, 2 * h2, 2 * w2))
    else:
        out = np.empty((n, c4 // 4, 2 * h2, 2 * w2), dtype=coeffs.dtype)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def to_model_space(images, wavelet: bool):
    return haar_dwt(images) if wavelet else images


def from_model_space(values, wavelet: bool):
    return haar_idwt(values) if wavelet else values


# --------------------------------------------------------------------------
# Splits and persistence
# --------------------------------------------------------------------------


def stratified_split(labels, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, list[int]]:
    """Disjoint, exhaustive train/val/test index lists, stratified by class."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        parts["train"] += idx[:n_train].tolist()
        parts["val"] += idx[n_train:n_train + n_val].tolist()
        parts["test"] += idx[n_train + n_val:].tolist()
    return {k: sorted(v) for k, v in parts.items()}


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    n, ch, h, w = dataset.images.shape
    meta = json.dumps(dataset.metadata, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, dataset.num_classes, ch, h, w))
        f.write(dataset.images.astype("<f4").tobytes())
        f.write(dataset.labels.astype("<i4").tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} not found")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, classes, ch, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not a dataset file")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    off = _HEADER.size
    n_px = n * ch * h * w
    try:
        images = np.frombuffer(raw, "<f4", n_px, off).reshape(n, ch, h, w)
        off += 4 * n_px
        labels = np.frombuffer(raw, "<i4", n, off)
        off += 4 * n
        (meta_len,) = struct.unpack_from("<I", raw, off)
        meta = json.loads(raw[off + 4:off + 4 + meta_len])
    except (ValueError, struct.error) as exc:
        raise DataError(f"{path}: corrupt payload ({exc})") from exc
    ds = Dataset(images.astype(np.float32), labels.astype(np.int64), meta)
    if ds.num_classes != classes:
        raise DataError(f"{path}: header says {classes} classes, metadata {ds.num_classes}")
    return ds


def save_splits(splits: dict[str, list[int]], path) -> None:
    Path(path).write_text(json.dumps(splits, sort_keys=True))


def load_splits(path) -> dict[str, list[int]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file {path} not found")
    return json.loads(path.read_text())


def load_image_folder(root, resolution: int | None = None, grayscale: bool = True) -> Dataset:
    """Load ``root/<class_name>/*.png|jpg`` into a dataset scaled to [-1, 1]."""
    from PIL import Image

    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class sub-directories under {root}")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
                continue
            img = Image.open(f).convert("L" if grayscale else "RGB")
            if resolution:
                img = img.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
            images.append(arr[None] if grayscale else arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise DataError(f"no images found under {root}")
    meta = {"generator": "image_folder", "root": str(root),
            "class_names": [d.name for d in class_dirs]}
    return Dataset(np.stack(images), np.array(labels), meta)
