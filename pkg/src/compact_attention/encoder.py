"""Convolutional feature encoders for the input label, reference labels and
reference appearance images.

All three encoders share one :class:`EncoderConfig`, so their outputs have
identical shapes for identical input sizes.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import STORAGE_DTYPE, ShapeError, random_fill, read_tensor, write_tensor

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 5
    channels: tuple[int, ...] = (64, 64, 128, 128, 256)
    kernel_size: int = 3
    strides: tuple[int, ...] = (1, 2, 2, 2, 2)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if len(self.channels) != self.layers or len(self.strides) != self.layers:
            raise ValueError(
                f"channels ({len(self.channels)}) and strides ({len(self.strides)}) "
                f"must both have {self.layers} entries"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if min(self.strides) < 1 or min(self.channels) < 1 or self.in_channels < 1:
            raise ValueError("strides and channel counts must be positive")

    def output_dims(self, h: int, w: int) -> tuple[int, int, int]:
        for s in self.strides:
            h, w = -(-h // s), -(-w // s)
        return self.channels[-1], h, w

    def to_json(self) -> str:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {"layers", "channels", "kernel_size", "strides", "in_channels"}
        unknown = set(d) - known - {"seed"}
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EncoderWeights:
    kernels: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def check(self, cfg: EncoderConfig) -> None:
        if len(self.kernels) != cfg.layers or len(self.biases) != cfg.layers:
            raise ShapeError(f"expected {cfg.layers} layers of weights, got {len(self.kernels)}")
        c_in = cfg.in_channels
        k = cfg.kernel_size
        for i, (kern, bias) in enumerate(zip(self.kernels, self.biases)):
            want = (cfg.channels[i], c_in, k, k)
            if kern.shape != want:
                raise ShapeError(f"layer {i} kernel has shape {kern.shape}, expected {want}")
            if bias.shape != (cfg.channels[i],):
                raise ShapeError(f"layer {i} bias has shape {bias.shape}, expected {(cfg.channels[i],)}")
            c_in = cfg.channels[i]


def conv2d_forward(x, kernel, bias, stride: int = 1, activation: bool = True) -> np.ndarray:
    """Zero-padded cross-correlation of a c_in×h×w input.

    ``kernel`` is c_out×c_in×k×k with odd k, padding is (k-1)/2, so the output
    is c_out×ceil(h/stride)×ceil(w/stride). A leaky ReLU (slope 0.2) follows
    unless ``activation`` is False.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"expected c×h×w input and 4-d kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel spatial size must be square and odd, got {kh}×{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1:
        raise ValueError("stride must be positive")

    pad = (kh - 1) // 2
    _, h, w = x.shape
    oh, ow = -(-h // stride), -(-w // stride)
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    # im2col: cols[c, dy, dx, oy, ox]
    cols = np.empty((c_in, kh, kw, oh, ow), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = xp[:, dy : dy + stride * (oh - 1) + 1 : stride, dx : dx + stride * (ow - 1) + 1 : stride]
    out = kernel.reshape(c_out, -1).astype(np.float64) @ cols.reshape(c_in * kh * kw, oh * ow)
    out += bias.astype(np.float64)[:, None]
    if activation:
        out = np.where(out >= 0, out, LEAKY_SLOPE * out)
    return out.reshape(c_out, oh, ow).astype(STORAGE_DTYPE)


def encode(weights: EncoderWeights, cfg: EncoderConfig, image) -> np.ndarray:
    image = np.asarray(image, dtype=STORAGE_DTYPE)
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ShapeError(f"input shape {image.shape} does not match {cfg.in_channels} input channels")
    weights.check(cfg)
    out = image
    for i in range(cfg.layers):
        last = i == cfg.layers - 1
        out = conv2d_forward(out, weights.kernels[i], weights.biases[i], cfg.strides[i], activation=not last)
    return out


def encode_batch(weights: EncoderWeights, cfg: EncoderConfig, images) -> np.ndarray:
    """Encode an m×c×h×w stack of reference images."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"expected m×c×h×w stack, got {images.shape}")
    return np.stack([encode(weights, cfg, im) for im in images])


def init_encoder(cfg: EncoderConfig, seed: int) -> EncoderWeights:
    """Seeded weights: uniform [-1, 1) scaled by 1/sqrt(fan_in); zero biases.

    Each layer draws from its own sub-seed so changing one layer's width leaves
    the others untouched.
    """
    weights = EncoderWeights()
    c_in = cfg.in_channels
    k = cfg.kernel_size
    for i, c_out in enumerate(cfg.channels):
        fan_in = c_in * k * k
        kern = random_fill((c_out, c_in, k, k), seed + 7919 * (i + 1)) / np.float32(math.sqrt(fan_in))
        weights.kernels.append(kern.astype(STORAGE_DTYPE))
        weights.biases.append(np.zeros(c_out, dtype=STORAGE_DTYPE))
        c_in = c_out
    return weights


def save_encoder(directory: str | os.PathLike, cfg: EncoderConfig, weights: EncoderWeights) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    weights.check(cfg)
    (d / "encoder.json").write_text(cfg.to_json())
    for i, (kern, bias) in enumerate(zip(weights.kernels, weights.biases)):
        write_tensor(d / f"layer{i}_kernel.ctf", kern)
        write_tensor(d / f"layer{i}_bias.ctf", bias)


def load_config(path: str | os.PathLike) -> EncoderConfig:
    return EncoderConfig.from_dict(json.loads(Path(path).read_text()))


def load_weights(directory: str | os.PathLike, cfg: EncoderConfig | None = None) -> tuple[EncoderConfig, EncoderWeights]:
    d = Path(directory)
    if cfg is None:
        cfg = load_config(d / "encoder.json")
    weights = EncoderWeights(
        kernels=[read_tensor(d / f"layer{i}_kernel.ctf") for i in range(cfg.layers)],
        biases=[read_tensor(d / f"layer{i}_bias.ctf") for i in range(cfg.layers)],
    )
    weights.check(cfg)
    return cfg, weights
