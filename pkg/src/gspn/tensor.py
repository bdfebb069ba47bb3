"""Dense B x C x H x W tensors and the GSPN-T binary container.

A ``Tensor4`` is a C-contiguous 4D numpy array; its flat index is
``((b*C + c)*H + h)*W + w``.  Only float32 and float64 are supported.
"""
from __future__ import annotations

import enum
import io
import struct
from typing import BinaryIO

import numpy as np

Tensor4 = np.ndarray

MAGIC = b"GSPN"
VERSION = 1
_HEADER = struct.Struct("<4sBBH4I")
_U32_MAX = 2**32 - 1


class DType(enum.IntEnum):
    F32 = 0
    F64 = 1

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f8")

    @classmethod
    def of(cls, arr: np.ndarray) -> "DType":
        if arr.dtype == np.float32:
            return cls.F32
        if arr.dtype == np.float64:
            return cls.F64
        raise TypeError(f"unsupported element type {arr.dtype}")


class AllocationError(MemoryError):
    pass


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def _check_dims(dims) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ValueError(f"expected 4 dims (B, C, H, W), got {len(dims)}")
    if any(d < 0 for d in dims):
        raise ValueError(f"dims must be non-negative, got {dims}")
    return dims


def alloc(dims, dtype: DType = DType.F64, fill: float = 0.0) -> Tensor4:
    dims = _check_dims(dims)
    dtype = DType(dtype)
    count = 1
    for d in dims:
        count *= d
    if any(d > _U32_MAX for d in dims) or count * dtype.numpy.itemsize > np.iinfo(np.intp).max:
        raise AllocationError(f"tensor of dims {dims} does not fit the index arithmetic")
    return np.full(dims, fill, dtype=dtype.numpy.newbyteorder("="))


def as_tensor4(arr, dtype=None) -> Tensor4:
    """Coerce ``arr`` to a contiguous float 4D array (copying only if needed)."""
    out = np.ascontiguousarray(arr, dtype=dtype)
    if out.ndim != 4:
        raise ValueError(f"expected a 4D tensor, got shape {out.shape}")
    if dtype is None and out.dtype not in (np.float32, np.float64):
        out = out.astype(np.float64)
    return out


def flip_w(t: Tensor4) -> Tensor4:
    return np.ascontiguousarray(t[..., ::-1])


def transpose_hw(t: Tensor4) -> Tensor4:
    return np.ascontiguousarray(t.transpose(0, 1, 3, 2))


def save(t: Tensor4, sink: BinaryIO) -> None:
    t = as_tensor4(t)
    dtype = DType.of(t)
    if any(d > _U32_MAX for d in t.shape):
        raise ValueError("dims exceed u32 range")
    sink.write(_HEADER.pack(MAGIC, VERSION, int(dtype), 0, *t.shape))
    sink.write(t.astype(dtype.numpy, copy=False).tobytes(order="C"))


def _read_exact(source: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = source.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def load(source: BinaryIO) -> Tensor4:
    header = _read_exact(source, _HEADER.size)
    if len(header) >= 4 and header[:4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(header) < _HEADER.size:
        raise TruncatedPayloadError(f"header is {len(header)} bytes, need {_HEADER.size}")
    _, version, dtype_tag, reserved, *dims = _HEADER.unpack(header)
    if version != VERSION:
        raise UnsupportedVersionError(f"unknown version {version}")
    if dtype_tag not in (0, 1):
        raise TensorFormatError(f"unknown dtype tag {dtype_tag}")
    if reserved != 0:
        raise TensorFormatError("reserved header bytes must be zero")
    dtype = DType(dtype_tag)
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = count * dtype.numpy.itemsize
    payload = _read_exact(source, nbytes)
    if len(payload) != nbytes:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, dims {tuple(dims)} need {nbytes}")
    arr = np.frombuffer(payload, dtype=dtype.numpy).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="))


def to_bytes(t: Tensor4) -> bytes:
    buf = io.BytesIO()
    save(t, buf)
    return buf.getvalue()


def from_bytes(data: bytes) -> Tensor4:
    """Strict inverse of :func:`to_bytes`; trailing bytes are an error."""
    buf = io.BytesIO(data)
    t = load(buf)
    if buf.read(1):
        raise TruncatedPayloadError("payload longer than the header dims allow")
    return t


def save_file(t: Tensor4, path) -> None:
    with open(path, "wb") as f:
        save(t, f)


def load_file(path) -> Tensor4:
    with open(path, "rb") as f:
        return from_bytes(f.read())
