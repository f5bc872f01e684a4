"""Compact basis attention over a set of reference features, and the
pixel-wise attention it replaces.

Shapes, with m references of c channels on an h×w grid and p bases:

* ``x_l``, ``x_a``: m×c×h×w reference label / appearance features
* ``x_in``: c×h×w input label features
* ``b_l``, ``b_a``: p×c basis sets
* ``a_b``: (m·h·w)×p, ``a_in``: (h·w)×p row-stochastic attention maps
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    STORAGE_DTYPE,
    ShapeError,
    flatten_pixels,
    flatten_refs,
    l2_normalize_rows,
    matmul,
    random_fill,
    softmax_rows,
    unflatten_pixels,
)

NORM_STRATEGIES = ("l2", "attention_sum")


@dataclass(frozen=True)
class AttentionConfig:
    p: int = 128
    s: int = 3
    lam: float = 0.9
    eps: float = 1e-12
    seed: int = 42
    norm: str = "l2"

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"p must be at least 1, got {self.p}")
        if self.s < 1:
            raise ValueError(f"s must be at least 1, got {self.s}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.norm not in NORM_STRATEGIES:
            raise ValueError(f"unknown norm strategy {self.norm!r}; choose from {NORM_STRATEGIES}")

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - {"p", "s", "lam", "eps", "seed", "norm"}
        if unknown:
            raise ValueError(f"unknown attention config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AttentionConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class CompactAttentionOutput:
    x_basis: np.ndarray
    b_l: np.ndarray
    b_a: np.ndarray
    a_b: np.ndarray
    a_in: np.ndarray


def _normalize(bases, a_b, eps: float, strategy: str) -> np.ndarray:
    if strategy == "l2":
        return l2_normalize_rows(bases, eps)
    # each basis becomes the attention-weighted mean of the pixels
    mass = a_b.astype(np.float64).sum(axis=0)
    return (bases.astype(np.float64) / np.maximum(mass, eps)[:, None]).astype(STORAGE_DTYPE)


def _check_cols(name_a, a, name_b, b):
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"{name_a} has {a.shape[1]} channels but {name_b} has {b.shape[1]}")


def basis_em_step(x_l, b_l, lam: float, eps: float = 1e-12, norm: str = "l2"):
    """One attention / basis-update round.

    Returns ``(new_basis, a_b)`` where ``a_b`` is computed from the basis that
    was passed in, and ``new_basis`` is the momentum blend
    ``(1 - lam) * b_l + lam * b_new``, renormalized row-wise.
    """
    _check_cols("x_l", x_l, "b_l", b_l)
    a_b = softmax_rows(matmul(x_l, b_l.T))
    b_new = _normalize(matmul(a_b.T, x_l), a_b, eps, norm)
    blended = (1.0 - lam) * b_l.astype(np.float64) + lam * b_new.astype(np.float64)
    return l2_normalize_rows(blended, eps), a_b


def initial_bases(p: int, c: int, seed: int, eps: float = 1e-12) -> np.ndarray:
    return l2_normalize_rows(random_fill((p, c), seed), eps)


def extract_bases(x_l, cfg: AttentionConfig):
    """Run ``cfg.s`` basis updates on the flattened reference label features.

    The returned map is recomputed from the final basis, so it matches ``b_l``.
    """
    x_l = np.asarray(x_l, dtype=STORAGE_DTYPE)
    if x_l.ndim != 2 or x_l.shape[0] < 1 or x_l.shape[1] < 1:
        raise ShapeError(f"x_l must be a nonempty (m·h·w)×c matrix, got {x_l.shape}")
    b_l = initial_bases(cfg.p, x_l.shape[1], cfg.seed, cfg.eps)
    for _ in range(cfg.s):
        b_l, _ = basis_em_step(x_l, b_l, cfg.lam, cfg.eps, cfg.norm)
    a_b = softmax_rows(matmul(x_l, b_l.T))
    return b_l, a_b


def appearance_basis(x_a, a_b, eps: float = 1e-12, norm: str = "l2") -> np.ndarray:
    """Appearance bases from the label attention map (no iterations of their own)."""
    if a_b.shape[0] != x_a.shape[0]:
        raise ShapeError(f"attention map has {a_b.shape[0]} rows but x_a has {x_a.shape[0]}")
    return _normalize(matmul(a_b.T, x_a), a_b, eps, norm)


def aggregate(x_in, b_l, b_a, h: int | None = None, w: int | None = None):
    """Attend input pixels over the label bases and mix the appearance bases.

    ``x_in`` is (h·w)×c. With ``h`` and ``w`` given, returns ``(x_basis, a_in)``
    with ``x_basis`` reshaped to c×h×w; otherwise ``x_basis`` stays (h·w)×c.
    """
    _check_cols("x_in", x_in, "b_l", b_l)
    _check_cols("b_l", b_l, "b_a", b_a)
    if b_l.shape[0] != b_a.shape[0]:
        raise ShapeError(f"b_l has {b_l.shape[0]} bases but b_a has {b_a.shape[0]}")
    a_in = softmax_rows(matmul(x_in, b_l.T))
    out = matmul(a_in, b_a)
    if h is not None and w is not None:
        out = unflatten_pixels(out, h, w)
    return out, a_in


def _check_inputs(x_in, x_a, x_l):
    x_in = np.asarray(x_in, dtype=STORAGE_DTYPE)
    x_a = np.asarray(x_a, dtype=STORAGE_DTYPE)
    x_l = np.asarray(x_l, dtype=STORAGE_DTYPE)
    if x_in.ndim != 3:
        raise ShapeError(f"x_in must be c×h×w, got shape {x_in.shape}")
    if x_a.ndim != 4 or x_l.ndim != 4:
        raise ShapeError(f"x_a and x_l must be m×c×h×w, got {x_a.shape} and {x_l.shape}")
    for name, x in (("x_a", x_a), ("x_l", x_l)):
        if x.shape[1] != x_in.shape[0]:
            raise ShapeError(f"x_in shape {x_in.shape} has {x_in.shape[0]} channels, {name} shape {x.shape} has {x.shape[1]}")
    if x_a.shape != x_l.shape:
        raise ShapeError(f"x_a shape {x_a.shape} differs from x_l shape {x_l.shape}")
    if min(x_in.shape) < 1 or min(x_a.shape) < 1:
        raise ShapeError(f"empty input: x_in {x_in.shape}, references {x_a.shape}")
    return x_in, x_a, x_l


def compact_attention(x_in, x_a, x_l, cfg: AttentionConfig | None = None) -> CompactAttentionOutput:
    cfg = cfg or AttentionConfig()
    x_in, x_a, x_l = _check_inputs(x_in, x_a, x_l)
    _, h, w = x_in.shape
    b_l, a_b = extract_bases(flatten_refs(x_l), cfg)
    b_a = appearance_basis(flatten_refs(x_a), a_b, cfg.eps, cfg.norm)
    x_basis, a_in = aggregate(flatten_pixels(x_in), b_l, b_a, h, w)
    return CompactAttentionOutput(x_basis=x_basis, b_l=b_l, b_a=b_a, a_b=a_b, a_in=a_in)


def pixelwise_attention(x_in, x_a, x_l) -> np.ndarray:
    """Every input pixel attends over all m·h·w reference pixels jointly."""
    x_in, x_a, x_l = _check_inputs(x_in, x_a, x_l)
    _, h, w = x_in.shape
    attn = softmax_rows(matmul(flatten_pixels(x_in), flatten_refs(x_l).T))
    return unflatten_pixels(matmul(attn, flatten_refs(x_a)), h, w)
