"""Segmentation network, domain discriminator, and checkpoint I/O.

The segmenter is a small U-Net: one 3x3 conv + ReLU per encoder stage with
2x max pooling, a bottleneck conv, then per stage a nearest-neighbour
upsample, concatenation with the matching skip, conv + ReLU, and a final
1x1 conv to K class scores. Teacher and student use the same config.

The discriminator reads the K-channel softmax map: conv + ReLU + 2x average
pooling per stage, then fully connected layers ending in two domain logits.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tc
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    num_classes: int = 2
    widths: tuple[int, ...] = (8, 16)
    depth: int = 2
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.widths) != self.depth:
            raise ConfigError(f"widths {self.widths} must have depth={self.depth} entries")
        if min((self.in_channels, self.kernel) + self.widths) <= 0:
            raise ConfigError("channel counts and kernel must be positive")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd for same padding")


@dataclass(frozen=True)
class DiscriminatorConfig:
    conv_widths: tuple[int, ...] = (8, 16, 32, 64)
    fc_widths: tuple[int, ...] = (64, 128, 2)
    in_channels: int = 2
    image_size: tuple[int, int] = (32, 32)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if not self.fc_widths or self.fc_widths[-1] != 2:
            raise ConfigError("last fully connected width must be 2 (source, target)")
        if min(self.conv_widths + self.fc_widths + (self.in_channels,)) <= 0:
            raise ConfigError("widths must be positive")
        div = 2 ** len(self.conv_widths)
        if any(s % div for s in self.image_size):
            raise ConfigError(f"image_size {self.image_size} must be divisible by {div}")

    @property
    def flat_features(self) -> int:
        h, w = (s // 2 ** len(self.conv_widths) for s in self.image_size)
        return self.conv_widths[-1] * h * w


ModelConfig = SegNetConfig | DiscriminatorConfig


@dataclass
class ModelParams:
    """Named trainable tensors plus the config and seed that produced them."""

    config: ModelConfig
    seed: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            self.seed,
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.config == other.config
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(t.data, other.tensors[k].data) for k, t in self.tensors.items())
        )


def _layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    k = config.kernel
    if isinstance(config, SegNetConfig):
        c = config.in_channels
        for i, w in enumerate(config.widths):
            shapes += [(f"enc{i}.w", (w, c, k, k)), (f"enc{i}.b", (w,))]
            c = w
        shapes += [("mid.w", (c, c, k, k)), ("mid.b", (c,))]
        for i in reversed(range(config.depth)):
            w = config.widths[i]
            shapes += [(f"dec{i}.w", (w, c + w, k, k)), (f"dec{i}.b", (w,))]
            c = w
        shapes += [("head.w", (config.num_classes, c, 1, 1)), ("head.b", (config.num_classes,))]
    elif isinstance(config, DiscriminatorConfig):
        c = config.in_channels
        for i, w in enumerate(config.conv_widths):
            shapes += [(f"conv{i}.w", (w, c, k, k)), (f"conv{i}.b", (w,))]
            c = w
        f = config.flat_features
        for i, w in enumerate(config.fc_widths):
            shapes += [(f"fc{i}.w", (w, f)), (f"fc{i}.b", (w,))]
            f = w
    else:
        raise ConfigError(f"unsupported config type {type(config).__name__}")
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, int(seed), tensors)


def _as_batch(batch) -> Tensor:
    return batch if isinstance(batch, Tensor) else Tensor(batch)


def forward_seg(params: ModelParams, batch) -> Tensor:
    """Per-pixel class logits, shape (B, K, H, W), for a (B, C_in, H, W) batch."""
    cfg = params.config
    if not isinstance(cfg, SegNetConfig):
        raise ConfigError("forward_seg needs segmentation-network params")
    x = _as_batch(batch)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise tc.ShapeError("forward_seg", x.shape, detail=f"want (B,{cfg.in_channels},H,W)")
    div = 2 ** cfg.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise tc.ShapeError(
            "forward_seg", x.shape, detail=f"H and W must be divisible by 2**depth = {div}"
        )
    p = params.tensors
    skips = []
    for i in range(cfg.depth):
        x = tc.relu(tc.conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"]))
        skips.append(x)
        x = tc.max_pool2d(x)
    x = tc.relu(tc.conv2d(x, p["mid.w"], p["mid.b"]))
    for i in reversed(range(cfg.depth)):
        x = tc.concat([tc.upsample2d(x), skips[i]], axis=1)
        x = tc.relu(tc.conv2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"]))
    return tc.conv2d(x, p["head.w"], p["head.b"])


def forward_disc(params: ModelParams, probmap) -> Tensor:
    """Two domain logits per sample from a (B, K, H, W) probability map."""
    cfg = params.config
    if not isinstance(cfg, DiscriminatorConfig):
        raise ConfigError("forward_disc needs discriminator params")
    x = _as_batch(probmap)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise tc.ShapeError(
            "forward_disc", x.shape, detail=f"want {cfg.in_channels} input channels"
        )
    if tuple(x.shape[2:]) != cfg.image_size:
        raise tc.ShapeError("forward_disc", x.shape, detail=f"configured for {cfg.image_size}")
    p = params.tensors
    for i in range(len(cfg.conv_widths)):
        x = tc.avg_pool2d(tc.relu(tc.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"])))
    x = tc.reshape(x, (x.shape[0], -1))
    last = len(cfg.fc_widths) - 1
    for i in range(len(cfg.fc_widths)):
        x = tc.linear(x, p[f"fc{i}.w"], p[f"fc{i}.b"])
        if i < last:
            x = tc.relu(x)
    return x


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_to_dict(config: ModelConfig) -> dict:
    kind = "segnet" if isinstance(config, SegNetConfig) else "discriminator"
    return {"kind": kind, **{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}}


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "segnet":
        return SegNetConfig(**d)
    if kind == "discriminator":
        return DiscriminatorConfig(**d)
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Magic, u16 version, u32 header length, JSON header, then <f8 buffers."""
    header = {
        "config": config_to_dict(params.config),
        "seed": params.seed,
        "tensors": [[name, list(t.shape)] for name, t in params.items()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    if len(raw) < 10:
        raise CheckpointError("truncated checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (want {CHECKPOINT_VERSION})")
    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    offset = 10 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        if offset + 8 * n > len(raw):
            raise CheckpointError(f"truncated checkpoint at tensor {name!r}")
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=True)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelParams(config_from_dict(header["config"]), int(header["seed"]), tensors)
