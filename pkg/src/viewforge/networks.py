"""Desk-scale encoder and noise-injecting perturbation generator, plus checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import decode_tensor, encode_tensor


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3

    @property
    def fans(self) -> tuple[int, int]:
        area = self.kernel * self.kernel
        return self.in_channels * area, self.out_channels * area


@dataclass(frozen=True)
class LinearSpec:
    name: str
    in_features: int
    out_features: int

    @property
    def fans(self) -> tuple[int, int]:
        return self.in_features, self.out_features


def glorot_bound(layer) -> float:
    fan_in, fan_out = layer.fans
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(seed: int, layers: Sequence, dtype=np.float32) -> ParamStore:
    """Glorot-uniform weights and zero biases, drawn in layer order from ``seed``."""
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    store = ParamStore(rng_seed=seed)
    for layer in layers:
        a = glorot_bound(layer)
        if isinstance(layer, ConvSpec):
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            n_bias = layer.out_channels
        else:
            shape = (layer.in_features, layer.out_features)
            n_bias = layer.out_features
        store.add(f"{layer.name}.weight", rng.uniform(-a, a, size=shape).astype(dtype))
        store.add(f"{layer.name}.bias", np.zeros(n_bias, dtype=dtype))
    return store


def _param(net, name: str, frozen: bool) -> Tensor:
    p = net.params[name]
    return Tensor(p.data) if frozen else p


def _conv(net, x: Tensor, layer: str, stride: int, frozen: bool) -> Tensor:
    w = _param(net, f"{layer}.weight", frozen)
    b = _param(net, f"{layer}.bias", frozen)
    return ad.conv2d(x, w, b, stride=stride, padding=w.shape[-1] // 2)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

ENCODER_WIDTHS = (32, 64, 64, 64)
MIN_ENCODER_SIZE = 16


def encoder_layers(in_channels: int, embed_dim: int = 64, widths: Sequence[int] = ENCODER_WIDTHS) -> list:
    layers, c = [], in_channels
    for i, w in enumerate(widths):
        layers.append(ConvSpec(f"conv{i}", c, w, 3))
        c = w
    layers.append(LinearSpec("proj", c, embed_dim))
    return layers


@dataclass
class EncoderNet:
    """Strided conv stack, global mean pool and a linear projection."""

    in_channels: int
    embed_dim: int = 64
    widths: tuple = ENCODER_WIDTHS
    params: Optional[ParamStore] = None
    seed: int = 0
    dtype: type = np.float32

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.params is None:
            self.params = init_params(self.seed, self.layers, self.dtype)

    @property
    def layers(self) -> list:
        return encoder_layers(self.in_channels, self.embed_dim, self.widths)


def encoder_output_shape(batch: int, height: int, width: int, embed_dim: int = 64,
                         depth: int = len(ENCODER_WIDTHS)) -> tuple[int, int, int, int]:
    """Spatial extent after the conv stack plus the embedding shape: (B, h, w, D)."""
    for _ in range(depth):
        height = ad.conv_output_size(height, 3, 2, 1)
        width = ad.conv_output_size(width, 3, 2, 1)
    return batch, height, width, embed_dim


def encoder_forward(net: EncoderNet, batch, frozen: bool = False) -> Tensor:
    """Embed a B×C×H×W batch into B×D.

    ``frozen=True`` uses constant copies of the weights: gradients still reach
    the input but never the encoder's parameters.
    """
    x = ad.as_tensor(batch)
    if x.ndim != 4:
        raise ad.ShapeError(f"encoder expects B×C×H×W input, got {x.shape}")
    if x.shape[1] != net.in_channels:
        raise ad.ShapeError(f"encoder built for {net.in_channels} channels, got input with {x.shape[1]}")
    if min(x.shape[2:]) < MIN_ENCODER_SIZE:
        raise ad.ShapeError(f"encoder needs H, W >= {MIN_ENCODER_SIZE}, got {x.shape[2:]}")
    h = x
    for i in range(len(net.widths)):
        h = ad.relu(_conv(net, h, f"conv{i}", 2, frozen))
    pooled = ad.mean(h, axes=(2, 3))
    w = _param(net, "proj.weight", frozen)
    b = _param(net, "proj.bias", frozen)
    out = ad.matmul(pooled, w)
    return ad.add(out, ad.broadcast_to(ad.reshape(b, (1, -1)), out.shape))


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def generator_layers(in_channels: int, width: int, blocks: int, noise_channels: int) -> list:
    layers = [ConvSpec("entry", in_channels + noise_channels, width, 3)]
    for i in range(blocks):
        layers.append(ConvSpec(f"block{i}.conv1", width + noise_channels, width, 3))
        layers.append(ConvSpec(f"block{i}.conv2", width, width, 3))
    layers.append(ConvSpec("exit", width, in_channels * 4, 3))
    return layers


@dataclass
class GeneratorNet:
    """Residual image-to-image network with tanh output.

    A stride-2 entry conv feeds residual blocks at half resolution; the exit
    conv emits four sub-pixel planes per channel that a pixel shuffle folds
    back to the input size, so H and W must be even.
    Uniform [0, 1) noise channels are concatenated to the input of the entry
    conv and of every residual block.
    """

    in_channels: int
    width: int = 16
    blocks: int = 3
    noise_channels: int = 1
    params: Optional[ParamStore] = None
    seed: int = 0
    dtype: type = np.float32

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.seed, self.layers, self.dtype)

    @property
    def layers(self) -> list:
        return generator_layers(self.in_channels, self.width, self.blocks, self.noise_channels)


def _with_noise(h: Tensor, rng: np.random.Generator, channels: int) -> Tensor:
    if channels == 0:
        return h
    B, _, H, W = h.shape
    noise = Tensor(rng.random((B, channels, H, W)).astype(h.dtype))
    return ad.concat([h, noise], axis=1)


def generator_forward(net: GeneratorNet, batch, noise_seed: int) -> Tensor:
    """Raw perturbation for a B×C×H×W batch, values in (-1, 1), before any budget."""
    x = ad.as_tensor(batch)
    if x.ndim != 4:
        raise ad.ShapeError(f"generator expects B×C×H×W input, got {x.shape}")
    if x.shape[1] != net.in_channels:
        raise ad.ShapeError(f"generator built for {net.in_channels} channels, got input with {x.shape[1]}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ad.ShapeError(f"generator needs even H and W, got {x.shape[2:]}")
    rng = np.random.default_rng(np.uint64(noise_seed & 0xFFFFFFFFFFFFFFFF))
    h = ad.relu(_conv(net, _with_noise(x, rng, net.noise_channels), "entry", 2, False))
    for i in range(net.blocks):
        r = ad.relu(_conv(net, _with_noise(h, rng, net.noise_channels), f"block{i}.conv1", 1, False))
        h = ad.add(h, _conv(net, r, f"block{i}.conv2", 1, False))
    return ad.tanh(ad.pixel_shuffle(_conv(net, h, "exit", 1, False), 2))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout (little-endian):
#   b"VFCK" | u8 version=1 | u32 config-json length | config JSON (utf-8)
#   u32 entry count, then per entry:
#     u16 name length | name (utf-8) | u64 blob length | MSTF-encoded tensor

CHECKPOINT_MAGIC = b"VFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, params: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        blob = encode_tensor(np.asarray(params[name]))
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, n = struct.unpack_from("<BI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 9
        config = json.loads(buf[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode()
            pos += ln
            (blen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            arr, end = decode_tensor(buf[pos:pos + blen])
            if end != blen:
                raise CheckpointError(f"{path}: entry {name!r} has inconsistent length")
            params[name] = arr
            pos += blen
    except struct.error as exc:
        raise CheckpointError(f"{path}: checkpoint truncated") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return config, params


def prefixed_state(prefix: str, store: ParamStore) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in store.state().items()}


def unprefixed_state(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}
