"""Binary formats for tensors and checkpoints.

Tensor blob ("SKOT"): magic, format version u32, dtype tag u8 (0 = float32,
1 = float64), rank u32, dims u64 * rank, then raw row-major data.  All
integers and floats little-endian.

Checkpoint ("SKOC"): magic, format version u32, a length-prefixed canonical
key=value text block (config and any scalar state), u64 tensor count, then
(u64 name length, name utf-8, SKOT blob) per tensor, names sorted
lexicographically.  Loading restores insertion order == sorted order.
"""

import os
import struct

import numpy as np

TENSOR_MAGIC = b"SKOT"
CKPT_MAGIC = b"SKOC"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def pack_tensor(arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype)
    if dt not in _TAG_FOR:
        raise TypeError(f"unsupported dtype {dt}; only f32/f64 serialize")
    head = TENSOR_MAGIC + struct.pack("<IBI", FORMAT_VERSION, _TAG_FOR[dt],
                                      arr.ndim)
    dims = struct.pack("<%dQ" % arr.ndim, *arr.shape)
    data = np.ascontiguousarray(arr).astype(dt.newbyteorder("<"),
                                            copy=False).tobytes()
    return head + dims + data


def unpack_tensor(buf: bytes, offset: int = 0):
    """Returns (array, next_offset)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise ValueError("bad tensor magic; not an SKOT blob")
    version, tag, rank = struct.unpack_from("<IBI", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    pos = offset + 4 + 9
    dims = struct.unpack_from("<%dQ" % rank, buf, pos)
    pos += 8 * rank
    dt = _DTYPE_TAGS[tag]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dt.itemsize
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def encode_kv(pairs: dict) -> str:
    """Canonical key=value text: sorted keys, one per line, repr-stable."""
    lines = []
    for key in sorted(pairs):
        val = pairs[key]
        if isinstance(val, float):
            text = np.format_float_scientific(val, unique=True)
        elif isinstance(val, bool):
            text = "true" if val else "false"
        elif isinstance(val, (list, tuple)):
            text = ",".join(str(v) for v in val)
        else:
            text = str(val)
        if "\n" in text or "=" in str(key):
            raise ValueError(f"unencodable config entry {key!r}")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def decode_kv(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def save_checkpoint(path, kv: dict, tensors: dict) -> None:
    """Write config text + named float arrays to one file."""
    for name in tensors:
        if not name or "\n" in name:
            raise ValueError(f"bad tensor name {name!r}")
    block = encode_kv(kv).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<Q", len(block)), block,
             struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(nb)))
        parts.append(nb)
        parts.append(pack_tensor(tensors[name]))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (kv dict of strings, dict name -> array)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (blen,) = struct.unpack_from("<Q", buf, 8)
    pos = 16
    kv = decode_kv(buf[pos:pos + blen].decode("utf-8"))
    pos += blen
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = unpack_tensor(buf, pos)
        tensors[name] = arr
    return kv, tensors
