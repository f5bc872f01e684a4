"""Dense float32 tensor helpers shared by the encoder, attention and bench code.

Tensors are plain :class:`numpy.ndarray` objects in float32. Products are
accumulated in float64 and rounded back to float32 on return.
"""
from __future__ import annotations

import contextlib
import contextvars
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

STORAGE_DTYPE = np.float32
CTF_MAGIC = b"CTF1"
CTF_VERSION = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class FormatError(ValueError):
    """Raised when a CTF1 file is malformed.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class OpCounter:
    multiply_adds: int = 0
    exps: int = 0
    log: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.multiply_adds + self.exps


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("_counter", default=None)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count multiply-adds in :func:`matmul` and exponentials in :func:`softmax_rows`.

    >>> with count_ops() as c:
    ...     _ = matmul(np.ones((2, 3)), np.ones((3, 4)))
    >>> c.multiply_adds
    24
    """
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=STORAGE_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    counter = _counter.get()
    if counter is not None:
        n = a.shape[0] * a.shape[1] * b.shape[1]
        counter.multiply_adds += n
        counter.log.append(("matmul", a.shape, b.shape, n))
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(STORAGE_DTYPE)


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    a = _as_matrix(a, "a")
    if a.size == 0:
        raise ShapeError(f"softmax of empty matrix {a.shape}")
    counter = _counter.get()
    if counter is not None:
        counter.exps += a.size
        counter.log.append(("softmax", a.shape, a.size))
    z = a.astype(np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    z /= z.sum(axis=1, keepdims=True)
    return z.astype(STORAGE_DTYPE)


def l2_normalize_rows(a, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by ``max(||row||, eps)``; zero rows stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = _as_matrix(a, "a")
    z = a.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    return (z / np.maximum(norms, eps)[:, None]).astype(STORAGE_DTYPE)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 started from ``seed``, as uint64."""
    seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = seed + steps * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def random_fill(dims: Sequence[int], seed: int) -> np.ndarray:
    """Uniform values in [-1, 1) from SplitMix64.

    The top 24 bits of each 64-bit draw become ``u = bits / 2**24``, and the
    value is ``2*u - 1``. Every such value is exactly representable in
    float32, so output is identical on every platform.
    """
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ShapeError("dims must be nonempty")
    if any(d < 1 for d in dims):
        raise ShapeError(f"zero or negative extent in {dims}")
    n = int(np.prod(dims))
    bits = (splitmix64(seed, n) >> np.uint64(40)).astype(np.float64)
    values = bits * (2.0 / (1 << 24)) - 1.0
    return values.astype(STORAGE_DTYPE).reshape(dims)


def reshape(t, new_dims: Sequence[int]) -> np.ndarray:
    t = np.asarray(t)
    new_dims = tuple(int(d) for d in new_dims)
    if int(np.prod(new_dims)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} values) to {new_dims}")
    return t.reshape(new_dims)


def flatten_refs(x) -> np.ndarray:
    """m×c×h×w -> (m·h·w)×c; pixel (i, y, x) lands on row i·hw + y·w + x."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected m×c×h×w tensor, got shape {x.shape}")
    m, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(m * h * w, c)


def unflatten_refs(mat, m: int, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`flatten_refs`."""
    mat = _as_matrix(mat, "mat")
    if mat.shape[0] != m * h * w:
        raise ShapeError(f"{mat.shape[0]} rows do not match m·h·w = {m * h * w}")
    return mat.reshape(m, h, w, mat.shape[1]).transpose(0, 3, 1, 2)


def flatten_pixels(x) -> np.ndarray:
    """c×h×w -> (h·w)×c."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected c×h×w tensor, got shape {x.shape}")
    c, h, w = x.shape
    return x.reshape(c, h * w).T


def unflatten_pixels(mat, h: int, w: int) -> np.ndarray:
    mat = _as_matrix(mat, "mat")
    if mat.shape[0] != h * w:
        raise ShapeError(f"{mat.shape[0]} rows do not match h·w = {h * w}")
    return np.ascontiguousarray(mat.T.reshape(mat.shape[1], h, w))


def encode_tensor(t) -> bytes:
    arr = np.ascontiguousarray(np.asarray(t, dtype=STORAGE_DTYPE))
    if arr.ndim < 1 or arr.ndim > 255:
        raise ShapeError(f"CTF1 supports 1 to 255 dims, got {arr.ndim}")
    header = CTF_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"file too short for magic: {len(buf)} bytes", len(buf))
    if buf[:3] == CTF_MAGIC[:3] and buf[3:4] != CTF_MAGIC[3:4]:
        raise FormatError(f"unsupported CTF version {buf[3:4]!r}, expected {CTF_MAGIC[3:4]!r}", 3)
    if buf[:4] != CTF_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CTF_MAGIC!r}", 0)
    if len(buf) < 5:
        raise FormatError("missing ndim byte", 4)
    ndim = buf[4]
    if ndim == 0:
        raise FormatError("ndim must be at least 1", 4)
    header_len = 5 + 4 * ndim
    if len(buf) < header_len:
        raise FormatError(f"truncated header: expected {header_len} bytes, got {len(buf)}", len(buf))
    dims = struct.unpack(f"<{ndim}I", buf[5:header_len])
    if any(d == 0 for d in dims):
        raise FormatError(f"zero extent in dims {dims}", 5)
    expected = header_len + 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) != expected:
        kind = "truncated payload" if len(buf) < expected else "trailing bytes after payload"
        raise FormatError(f"{kind}: expected {expected} bytes, got {len(buf)}", min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", offset=header_len)
    return data.astype(STORAGE_DTYPE).reshape(dims)


def write_tensor(path: str | os.PathLike, t) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
