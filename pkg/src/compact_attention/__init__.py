"""Compact basis attention over multi-reference features, with Delaunay-based
reference selection."""

__version__ = "0.1.0"

from .attention import (
    AttentionConfig,
    CompactAttentionOutput,
    aggregate,
    appearance_basis,
    basis_em_step,
    compact_attention,
    extract_bases,
    pixelwise_attention,
)
from .refselect import AppearanceMap, EmbeddedFrame, build_map, landmarks_to_coord, locate, select_references
from .tensor import FormatError, ShapeError, read_tensor, write_tensor

__all__ = [
    "AppearanceMap",
    "AttentionConfig",
    "CompactAttentionOutput",
    "EmbeddedFrame",
    "FormatError",
    "ShapeError",
    "aggregate",
    "appearance_basis",
    "basis_em_step",
    "build_map",
    "compact_attention",
    "extract_bases",
    "landmarks_to_coord",
    "locate",
    "pixelwise_attention",
    "read_tensor",
    "select_references",
    "write_tensor",
]
