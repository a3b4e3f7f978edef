"""Budgeted perturbation views and the hand-designed baseline augmentations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabeledDataset, resize_image

VIEW_RANGE = (-1.0, 1.0)


@dataclass
class PerturbationDelta:
    delta: Tensor  # B×C×H×W
    budget: float  # mean absolute distortion per element

    def __post_init__(self):
        if not self.budget > 0:
            raise ValueError(f"distortion budget must be positive, got {self.budget}")
        if self.delta.ndim != 4:
            raise ad.ShapeError(f"delta must be B×C×H×W, got {self.delta.shape}")

    def per_sample_mean_abs(self) -> np.ndarray:
        d = self.delta.data.astype(np.float64)
        return np.abs(d).reshape(d.shape[0], -1).mean(axis=1)


def project_l1(delta: PerturbationDelta) -> PerturbationDelta:
    """Shrink each sample onto the l1 ball of radius ``budget * C*H*W``.

    Samples already inside the ball pass through unchanged (so an all-zero
    delta stays zero). The norm stays in the graph where shrinking is active.
    """
    d = delta.delta
    B = d.shape[0]
    target = delta.budget * float(np.prod(d.shape[1:]))
    norm = ad.l1norm(d, axes=(1, 2, 3))  # (B,)
    active = (norm.data > target).astype(d.dtype)
    # inactive samples: scale = 1 and the norm path is cut by the zero mask
    safe_norm = ad.add(norm, Tensor(1.0 - active, dtype=d.dtype))
    scale = ad.add(ad.mul(Tensor(active * target, dtype=d.dtype), ad.div(1.0, safe_norm)),
                   Tensor(1.0 - active, dtype=d.dtype))
    scale = ad.broadcast_to(ad.reshape(scale, (B, 1, 1, 1)), d.shape)
    return PerturbationDelta(ad.mul(d, scale), delta.budget)


def make_view(x: Tensor, delta: PerturbationDelta) -> Tensor:
    """``clamp(x + delta, -1, 1)``."""
    x = ad.as_tensor(x)
    if x.shape != delta.delta.shape:
        raise ad.ShapeError(f"make_view: input {x.shape} and delta {delta.delta.shape} differ")
    return ad.clamp(ad.add(x, delta.delta), *VIEW_RANGE)


# ---------------------------------------------------------------------------
# expert augmentations (numpy, no gradients)
# ---------------------------------------------------------------------------

def random_crop(x: np.ndarray, rng: np.random.Generator, scale_range=(0.2, 1.0),
                ratio_range=(3 / 4, 4 / 3), attempts: int = 10) -> np.ndarray:
    """Random resized crop applied identically to every channel of a C×H×W image."""
    x = np.asarray(x)
    C, H, W = x.shape
    if H < 8 or W < 8:
        raise ValueError(f"image {H}x{W} is too small to crop (needs at least 8x8)")
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    if lo == 1.0:
        return x.copy()
    area = H * W
    log_ratio = np.log(ratio_range)
    for _ in range(attempts):
        target = area * rng.uniform(lo, hi)
        aspect = np.exp(rng.uniform(*log_ratio))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            break
    else:
        top, left, h, w = 0, 0, H, W
    return resize_image(x[:, top:top + h, left:left + w], H, W)


def horizontal_flip(x: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    x = np.asarray(x)
    if rng.random() < p:
        return x[..., ::-1].copy()
    return x.copy()


def expert_view(x: np.ndarray, rng: np.random.Generator, flip: bool) -> np.ndarray:
    out = random_crop(x, rng)
    return horizontal_flip(out, rng) if flip else out


def expert_batch(batch: np.ndarray, rng: np.random.Generator, flip: bool) -> np.ndarray:
    return np.stack([expert_view(img, rng, flip) for img in batch])


# ---------------------------------------------------------------------------
# channel normalisation
# ---------------------------------------------------------------------------

@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-d arrays of equal length")
        if np.any(self.std <= 0):
            bad = np.flatnonzero(self.std <= 0).tolist()
            raise ValueError(f"channels {bad} have zero standard deviation")

    @classmethod
    def compute(cls, images: np.ndarray) -> "ChannelStats":
        x = np.asarray(images, dtype=np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        return cls(mean, std)

    def apply(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images)
        shape = (-1, 1, 1) if x.ndim == 3 else (1, -1, 1, 1)
        if x.shape[-3] != len(self.mean):
            raise ad.ShapeError(f"images have {x.shape[-3]} channels, stats cover {len(self.mean)}")
        return ((x - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(x.dtype)

    def invert(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images)
        shape = (-1, 1, 1) if x.ndim == 3 else (1, -1, 1, 1)
        return (x * self.std.reshape(shape) + self.mean.reshape(shape)).astype(x.dtype)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def normalize_channels(ds: LabeledDataset, stats: Optional[ChannelStats] = None) -> tuple[LabeledDataset, ChannelStats]:
    """Z-score every channel. Without ``stats`` they are computed from ``ds`` itself,
    which must then be the training split."""
    if stats is None:
        if ds.split != "train":
            raise ValueError(f"channel statistics must come from the train split, got {ds.split!r}")
        stats = ChannelStats.compute(ds.images)
    out = LabeledDataset(stats.apply(ds.images), ds.labels, ds.num_classes, ds.split, list(ds.class_names))
    return out, stats
