"""Binary tensor/checkpoint formats: round-trips and corruption handling."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sko.serialization import (
    CKPT_MAGIC,
    FORMAT_VERSION,
    TENSOR_MAGIC,
    decode_kv,
    encode_kv,
    load_checkpoint,
    pack_tensor,
    save_checkpoint,
    unpack_tensor,
)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4), (1, 1)])
def test_tensor_blob_roundtrip(dtype, shape):
    arr = np.random.default_rng(0).normal(size=shape).astype(dtype)
    back, end = unpack_tensor(pack_tensor(arr))
    assert end == len(pack_tensor(arr))
    assert back.dtype == np.dtype(dtype)
    assert back.shape == shape
    assert np.array_equal(back, arr)


def test_tensor_blob_offset_chaining():
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    b = np.ones(4, dtype=np.float32)
    buf = pack_tensor(a) + pack_tensor(b)
    got_a, pos = unpack_tensor(buf)
    got_b, end = unpack_tensor(buf, pos)
    assert np.array_equal(got_a, a)
    assert np.array_equal(got_b, b)
    assert end == len(buf)


def test_pack_rejects_other_dtypes():
    with pytest.raises(TypeError):
        pack_tensor(np.zeros(3, dtype=np.int64))
    with pytest.raises(TypeError):
        pack_tensor(np.zeros(3, dtype=np.float16))


def test_unpack_rejects_bad_magic():
    blob = bytearray(pack_tensor(np.zeros(2)))
    blob[:4] = b"NOPE"
    with pytest.raises(ValueError):
        unpack_tensor(bytes(blob))


def test_unpack_rejects_bad_version():
    blob = bytearray(pack_tensor(np.zeros(2)))
    struct.pack_into("<I", blob, 4, FORMAT_VERSION + 9)
    with pytest.raises(ValueError):
        unpack_tensor(bytes(blob))


def test_unpack_rejects_unknown_dtype_tag():
    blob = bytearray(pack_tensor(np.zeros(2)))
    blob[8] = 7
    with pytest.raises(ValueError):
        unpack_tensor(bytes(blob))


def test_unpack_rejects_truncation():
    blob = pack_tensor(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        unpack_tensor(blob[: len(blob) - 8])


# ---------------------------------------------------------------------------
# key=value text block

def test_encode_kv_canonical_form():
    text = encode_kv({"b": 2, "a": True, "c": [1, 2, 3], "d": 0.5})
    assert text == "a=true\nb=2\nc=1,2,3\nd=5.e-01\n"


def test_encode_kv_rejects_unencodable():
    with pytest.raises(ValueError):
        encode_kv({"a=b": 1})
    with pytest.raises(ValueError):
        encode_kv({"a": "two\nlines"})


def test_decode_kv_skips_comments_and_blanks():
    out = decode_kv("# header\n\na = 1\nb=x y\n")
    assert out == {"a": "1", "b": "x y"}
    with pytest.raises(ValueError):
        decode_kv("just words\n")


@settings(max_examples=60, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_kv_float_roundtrip_is_exact(value):
    back = float(decode_kv(encode_kv({"x": value}))["x"])
    assert back == value or (value == 0.0 and back == 0.0)


# ---------------------------------------------------------------------------
# checkpoint container

def test_checkpoint_roundtrip_sorted_names(tmp_path):
    path = str(tmp_path / "c.skoc")
    tensors = {
        "zeta": np.random.default_rng(1).normal(size=(3, 4)),
        "alpha": np.ones(7, dtype=np.float32),
        "mid.key": np.arange(12, dtype=np.float64).reshape(2, 3, 2),
    }
    kv = {"vocab_size": 256, "lr_base": 6e-4, "tie_embeddings": True}
    save_checkpoint(path, kv, tensors)
    kv2, t2 = load_checkpoint(path)
    assert kv2["vocab_size"] == "256"
    assert float(kv2["lr_base"]) == 6e-4
    assert kv2["tie_embeddings"] == "true"
    assert list(t2.keys()) == sorted(tensors)  # canonical order
    for name, arr in tensors.items():
        assert t2[name].dtype == arr.dtype
        assert np.array_equal(t2[name], arr)


def test_checkpoint_write_is_atomic(tmp_path):
    path = tmp_path / "c.skoc"
    save_checkpoint(str(path), {"a": 1}, {"t": np.zeros(2)})
    assert path.exists()
    assert not (tmp_path / "c.skoc.tmp").exists()


def test_checkpoint_rejects_bad_tensor_names(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(str(tmp_path / "c.skoc"), {}, {"": np.zeros(2)})
    with pytest.raises(ValueError):
        save_checkpoint(str(tmp_path / "c.skoc"), {}, {"a\nb": np.zeros(2)})


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.skoc"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ValueError):
        load_checkpoint(str(path))


def test_checkpoint_rejects_tensor_magic(tmp_path):
    """A bare tensor blob is not a checkpoint."""
    path = tmp_path / "bad.skoc"
    path.write_bytes(pack_tensor(np.zeros(3)))
    assert TENSOR_MAGIC != CKPT_MAGIC
    with pytest.raises(ValueError):
        load_checkpoint(str(path))
