"""Datasets: synthetic multispectral scenes, band resampling/stacking, splits and file IO.

MSTF tensor files
-----------------
A single tensor per file, little-endian throughout::

    offset  size      field
    0       4         magic b"MSTF"
    4       1         version (u8) = 1
    5       1         dtype (u8): 1 = float32, 2 = float64
    6       1         ndim (u8)
    7       4*ndim    extents (u32 each), outermost first
    ...               row-major payload

Dataset directories hold ``images.mstf`` (N×C×H×W), ``labels.mstf`` (N class
indices, or N×L multi-hot) and ``meta.json``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"MSTF"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

SPLITS = ("train", "val", "test")
SHAPES = ("blob", "stripes", "gradient")


class TensorFormatError(ValueError):
    """Malformed MSTF content."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


# ---------------------------------------------------------------------------
# MSTF
# ---------------------------------------------------------------------------

def encode_tensor(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.dtype not in _CODE_FOR:
        raise TypeError(f"MSTF stores float32 or float64, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("MSTF supports at most 255 dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODE_FOR[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns the array and the end offset."""
    if len(buf) - offset < 7:
        if buf[offset:offset + 4] != MAGIC[:len(buf) - offset]:
            raise BadMagicError("not an MSTF tensor")
        raise TruncatedFileError("MSTF header truncated")
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported MSTF version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 4 * ndim:
        raise TruncatedFileError("MSTF extents truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise TruncatedFileError(f"MSTF payload truncated: expected {nbytes} bytes, found {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor_file(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor_file(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return arr


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    images: np.ndarray  # N×C×H×W
    labels: np.ndarray  # N ints, or N×L multi-hot
    num_classes: int
    split: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape[0] != n:
            raise ValueError(f"{n} images but {self.labels.shape[0]} labels")
        if self.labels.ndim == 1:
            if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"class indices must lie in [0, {self.num_classes})")
            self.labels = self.labels.astype(np.int64)
        elif self.labels.ndim == 2:
            if self.labels.shape[1] != self.num_classes:
                raise ValueError(f"multi-hot width {self.labels.shape[1]} != num_classes {self.num_classes}")
            if not np.isin(self.labels, (0, 1)).all():
                raise ValueError("multi-hot labels must contain only 0/1")
            self.labels = self.labels.astype(np.int64)
        else:
            raise ValueError(f"labels must be 1-d or 2-d, got shape {self.labels.shape}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(self.num_classes)]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def multi_label(self) -> bool:
        return self.labels.ndim == 2

    @property
    def chw(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes,
                              split or self.split, list(self.class_names))


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    channels: int = 8
    resolution: int = 32
    samples_per_class: int = 200
    noise: float = 0.3
    seed: int = 0
    shapes: tuple = SHAPES
    multi_label: bool = False

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.channels < 1:
            raise ValueError("need at least 1 channel")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.resolution < 1 or self.samples_per_class < 1:
            raise ValueError("resolution and samples_per_class must be positive")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"shape vocabulary must be a non-empty subset of {SHAPES}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        return d


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Per-class spectral signatures, L×C, with entries in [-1, 1]."""
    rng = np.random.default_rng([spec.seed, 0])
    return rng.uniform(-1.0, 1.0, size=(spec.num_classes, spec.channels))


def shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random spatial mask in [0, 1] of the given kind."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    if kind == "blob":
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        radius = rng.uniform(0.15, 0.35)
        return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        return 0.5 * (1.0 + wave)
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)
        return (ramp - ramp.min()) / (ramp.max() - ramp.min())
    raise ValueError(f"unknown shape kind {kind!r}")


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Class signatures painted through random shape masks, plus Gaussian noise.

    Single-label datasets hold exactly ``samples_per_class`` items per class in
    class-major order. In multi-label mode every sample also paints up to two
    extra classes, each through its own mask.
    """
    protos = class_prototypes(spec)
    rng = np.random.default_rng([spec.seed, 1])
    L, C, S = spec.num_classes, spec.channels, spec.resolution
    n = L * spec.samples_per_class
    images = np.empty((n, C, S, S), dtype=np.float32)
    labels = np.zeros((n, L), dtype=np.int64) if spec.multi_label else np.empty(n, dtype=np.int64)
    i = 0
    for cls in range(L):
        for _ in range(spec.samples_per_class):
            present = [cls]
            if spec.multi_label:
                others = [c for c in range(L) if c != cls]
                extra = rng.integers(0, 3)
                present += list(rng.choice(others, size=extra, replace=False))
            img = np.zeros((C, S, S))
            for c in present:
                mask = shape_mask(spec.shapes[rng.integers(len(spec.shapes))], S, rng)
                img += protos[c][:, None, None] * mask[None]
            if spec.noise > 0:
                img += spec.noise * rng.standard_normal(img.shape)
            images[i] = img
            if spec.multi_label:
                labels[i, present] = 1
            else:
                labels[i] = cls
            i += 1
    return LabeledDataset(images, labels, L, "train", [f"class_{c}" for c in range(L)])


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres (corner alignment off), clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_image(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of the last two axes."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if (h, w) == (height, width):
        return x.copy()
    y0, y1, fy = _interp_axis(h, height)
    x0, x1, fx = _interp_axis(w, width)
    fy = fy.astype(x.dtype)[:, None]
    fx = fx.astype(x.dtype)
    top, bottom = x[..., y0, :], x[..., y1, :]
    rows = top + fy * (bottom - top)
    left, right = rows[..., x0], rows[..., x1]
    return left + fx * (right - left)


def resize_band(band, target: Sequence[int]) -> np.ndarray:
    band = np.asarray(getattr(band, "data", band))
    if band.ndim != 2 or min(band.shape) < 1:
        raise ValueError(f"band must be a non-empty 2-d array, got shape {band.shape}")
    height, width = target
    return resize_image(band, int(height), int(width))


def stack_bands(bands: Sequence, target: Sequence[int]) -> np.ndarray:
    """Resize every band to ``target`` and stack them as channels, order preserved."""
    if len(bands) == 0:
        raise ValueError("stack_bands needs at least one band")
    return np.stack([resize_band(b, target) for b in bands])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _check_fractions(fractions) -> tuple[float, float, float]:
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, val, test)")
    fr = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fr):
        raise ValueError(f"every split fraction must be positive, got {fr}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")
    return fr


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _quotas(total: int, sizes: np.ndarray, frac: float) -> np.ndarray:
    # largest-remainder apportionment of ``total`` items across groups
    raw = sizes * frac
    q = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - q), kind="stable")
    q[order[:total - q.sum()]] += 1
    return q


def split_dataset(ds: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint train/val/test subsets; stratified by class for single-label data.

    Split sizes are rounded once over the whole dataset and apportioned to the
    classes, so every class share is within one sample of the global share.
    """
    _, f_val, f_test = _check_fractions(fractions)
    rng = np.random.default_rng(seed)

    if ds.multi_label:
        groups = [np.arange(len(ds))]
    else:
        groups = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
        for c, g in enumerate(groups):
            if 0 < len(g) < 3:
                raise ValueError(f"class {c} has {len(g)} samples; stratified splitting needs at least 3")
    sizes = np.array([len(g) for g in groups])
    n = int(sizes.sum())
    n_val_total = _round_half_up(f_val * n)
    n_hold_total = n_val_total + _round_half_up(f_test * n)
    n_hold = _quotas(n_hold_total, sizes, n_hold_total / max(n, 1))
    n_val = _quotas(n_val_total, n_hold, n_val_total / max(n_hold_total, 1))
    n_test = n_hold - n_val
    if np.any((sizes > 0) & (sizes - n_val - n_test < 1)):
        raise ValueError("split fractions leave a class with no training examples")

    parts: dict[str, list[np.ndarray]] = {s: [] for s in SPLITS}
    for g, nv, nt in zip(groups, n_val, n_test):
        perm = rng.permutation(g)
        n_train = len(g) - nv - nt
        parts["train"].append(perm[:n_train])
        parts["val"].append(perm[n_train:n_train + nv])
        parts["test"].append(perm[n_train + nv:])
    return tuple(ds.subset(np.sort(np.concatenate(parts[s])), s) for s in SPLITS)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def save_dataset(directory, ds: LabeledDataset, meta: Optional[dict] = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor_file(out / "images.mstf", ds.images.astype(np.float32))
    write_tensor_file(out / "labels.mstf", ds.labels.astype(np.float32))
    info = {
        "label_arity": "multi" if ds.multi_label else "single",
        "num_classes": ds.num_classes,
        "class_names": list(ds.class_names),
        "shape": list(ds.chw),
    }
    info.update(meta or {})
    (out / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(directory) -> tuple[LabeledDataset, dict]:
    src = Path(directory)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{src} is not a dataset directory (no meta.json)")
    meta = json.loads(meta_path.read_text())
    images = read_tensor_file(src / "images.mstf")
    labels = read_tensor_file(src / "labels.mstf")
    multi = meta.get("label_arity", "single") == "multi"
    if multi != (labels.ndim == 2):
        raise ValueError(f"{src}: meta.json says {meta.get('label_arity')!r} labels but labels.mstf has shape {labels.shape}")
    ds = LabeledDataset(images, labels.astype(np.int64), int(meta["num_classes"]), "train",
                        list(meta.get("class_names", [])))
    return ds, meta


def dataset_exists(directory) -> bool:
    return os.path.exists(os.path.join(directory, "meta.json"))
