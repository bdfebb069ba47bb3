import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gspn import tensor as T

dims4 = st.tuples(*[st.integers(0, 4)] * 4)


def test_alloc_zero_fill():
    t = T.alloc((1, 1, 2, 2), T.DType.F64, 0.0)
    assert t.shape == (1, 1, 2, 2) and t.dtype == np.float64
    assert t.size == 4 and not t.any()


def test_alloc_constant_fill_f32():
    t = T.alloc((2, 3, 4, 5), T.DType.F32, 1.5)
    assert t.dtype == np.float32 and t.size == 120
    assert np.all(t == 1.5)


def test_alloc_empty_dim():
    t = T.alloc((1, 1, 0, 4), T.DType.F64, 0)
    assert t.shape == (1, 1, 0, 4) and t.size == 0


def test_alloc_rejects_negative_and_overflow():
    with pytest.raises(ValueError):
        T.alloc((1, -1, 2, 2))
    with pytest.raises(T.AllocationError):
        T.alloc((2**32, 1, 1, 1))
    with pytest.raises(T.AllocationError):
        T.alloc((2**31, 2**31, 2**31, 2**31))


def test_layout_law():
    B, C, H, W = 2, 3, 4, 5
    t = np.arange(B * C * H * W, dtype=np.float64).reshape(B, C, H, W)
    flat = t.ravel()
    rng = np.random.default_rng(0)
    for _ in range(50):
        b, c, h, w = (int(rng.integers(n)) for n in (B, C, H, W))
        assert t[b, c, h, w] == flat[((b * C + c) * H + h) * W + w]
    assert T.as_tensor4(t).flags.c_contiguous


def test_flip_w_examples():
    t = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert T.flip_w(t)[0, 0].tolist() == [[2.0, 1.0], [4.0, 3.0]]
    one = np.random.default_rng(1).standard_normal((2, 2, 3, 1))
    assert np.array_equal(T.flip_w(one), one)


def test_transpose_hw_examples():
    t = np.arange(6.0).reshape(1, 1, 2, 3)
    out = T.transpose_hw(t)
    assert out.shape == (1, 1, 3, 2)
    assert np.array_equal(out[0, 0], t[0, 0].T)
    assert T.transpose_hw(np.ones((1, 1, 1, 5))).shape == (1, 1, 5, 1)
    assert T.transpose_hw(t).flags.c_contiguous


@settings(max_examples=40, deadline=None)
@given(dims4, st.integers(0, 2**32 - 1))
def test_flip_and_transpose_are_involutions(dims, seed):
    t = np.random.default_rng(seed).standard_normal(dims)
    assert np.array_equal(T.flip_w(T.flip_w(t)), t)
    assert np.array_equal(T.transpose_hw(T.transpose_hw(t)), t)


@settings(max_examples=30, deadline=None)
@given(dims4, st.integers(0, 2**32 - 1))
def test_reorientation_commutes_with_elementwise_ops(dims, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(dims), rng.standard_normal(dims)
    for f in (T.flip_w, T.transpose_hw):
        assert np.array_equal(f(a * b + 2.0), f(a) * f(b) + 2.0)


@settings(max_examples=40, deadline=None)
@given(dims4, st.sampled_from([np.float32, np.float64]), st.integers(0, 2**32 - 1))
def test_roundtrip_bit_exact(dims, dtype, seed):
    t = np.random.default_rng(seed).standard_normal(dims).astype(dtype)
    back = T.from_bytes(T.to_bytes(t))
    assert back.dtype == t.dtype and back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_roundtrip_identical_bytes_f64():
    t = np.random.default_rng(2).standard_normal((2, 3, 4, 5))
    data = T.to_bytes(t)
    assert T.to_bytes(T.from_bytes(data)) == data


def test_header_layout():
    data = T.to_bytes(np.zeros((1, 2, 3, 4), dtype=np.float32))
    assert data[:4] == bytes([0x47, 0x53, 0x50, 0x4E])
    assert data[4] == 1 and data[5] == 0 and data[6:8] == b"\0\0"
    assert struct.unpack("<4I", data[8:24]) == (1, 2, 3, 4)
    assert len(data) == 24 + 24 * 4
    f64 = T.to_bytes(np.array([1.0]).reshape(1, 1, 1, 1))
    assert f64[5] == 1 and f64[24:] == struct.pack("<d", 1.0)


def test_bad_magic():
    data = bytearray(T.to_bytes(np.ones((1, 1, 2, 2))))
    data[0] = ord("X")
    with pytest.raises(T.BadMagicError, match="bad magic"):
        T.from_bytes(bytes(data))


def test_unknown_version():
    data = bytearray(T.to_bytes(np.ones((1, 1, 2, 2))))
    data[4] = 9
    with pytest.raises(T.UnsupportedVersionError):
        T.from_bytes(bytes(data))


def test_truncated_payload():
    data = T.to_bytes(np.ones((1, 1, 2, 2)))
    with pytest.raises(T.TruncatedPayloadError):
        T.from_bytes(data[:-1])
    with pytest.raises(T.TruncatedPayloadError):
        T.from_bytes(data[:10])
    with pytest.raises(T.TruncatedPayloadError):
        T.from_bytes(data + b"\0" * 8)


def test_parse_errors_are_distinct():
    kinds = {T.BadMagicError, T.UnsupportedVersionError, T.TruncatedPayloadError}
    assert len(kinds) == 3
    assert all(issubclass(k, T.TensorFormatError) for k in kinds)


def test_stream_load(tmp_path):
    t = np.random.default_rng(3).standard_normal((1, 2, 3, 3)).astype(np.float32)
    buf = io.BytesIO()
    T.save(t, buf)
    buf.seek(0)
    assert np.array_equal(T.load(buf), t)
    path = tmp_path / "t.gspnt"
    T.save_file(t, path)
    assert np.array_equal(T.load_file(path), t)
