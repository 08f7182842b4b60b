"""Binary checkpoint container.

Layout (all integers little-endian):
    magic "BDET" | u32 version | u64 entry count
    per entry: u16 name length | name bytes (utf-8) | u8 kind | u8 rank
               | u64 extents[rank] | payload
Kinds: 0 = float32 array, 1 = int64 array, 2 = uint64 array, 3 = utf-8 text.
Float payloads are raw 32-bit little-endian words, so load(save(x)) is
bit-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"BDET"
VERSION = 1

_KIND_F32 = 0
_KIND_I64 = 1
_KIND_U64 = 2
_KIND_TEXT = 3

_DTYPES = {
    _KIND_F32: np.dtype("<f4"),
    _KIND_I64: np.dtype("<i8"),
    _KIND_U64: np.dtype("<u8"),
}


class CheckpointError(RuntimeError):
    pass


def _classify(value) -> tuple[int, bytes, tuple[int, ...]]:
    if isinstance(value, str):
        payload = value.encode("utf-8")
        return _KIND_TEXT, payload, (len(payload),)
    if isinstance(value, (int, np.integer)):
        arr = np.asarray(int(value), dtype="<i8")
        return _KIND_I64, arr.tobytes(), ()
    arr = np.asarray(value)
    if arr.dtype == np.float32:
        kind = _KIND_F32
    elif arr.dtype == np.int64:
        kind = _KIND_I64
    elif arr.dtype == np.uint64:
        kind = _KIND_U64
    else:
        raise CheckpointError(f"unsupported checkpoint dtype {arr.dtype}")
    return kind, np.ascontiguousarray(arr).astype(_DTYPES[kind]).tobytes(), arr.shape


def save_checkpoint(path: Path | str, entries: dict[str, object]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(entries))
    for name, value in entries.items():
        kind, payload, shape = _classify(value)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<BB", kind, len(shape))
        for extent in shape:
            blob += struct.pack("<Q", extent)
        blob += payload
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: Path | str) -> dict[str, object]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint missing: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} not supported "
                              f"by reader version {VERSION}")
    (count,) = struct.unpack_from("<Q", raw, 8)
    pos = 16
    entries: dict[str, object] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        kind, rank = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from("<" + "Q" * rank, raw, pos)
        pos += 8 * rank
        if kind == _KIND_TEXT:
            (length,) = shape
            entries[name] = raw[pos:pos + length].decode("utf-8")
            pos += length
        else:
            dtype = _DTYPES[kind]
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).copy()
            pos += n * dtype.itemsize
            entries[name] = arr.reshape(shape) if shape else arr.reshape(())
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return entries


# -- rng state as raw words ------------------------------------------------------

_M64 = (1 << 64) - 1


def rng_to_words(rng: np.random.Generator) -> np.ndarray:
    """PCG64 generator state flattened into six 64-bit words."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generators are checkpointable")
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    return np.array([s & _M64, (s >> 64) & _M64, inc & _M64, (inc >> 64) & _M64,
                     st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def rng_from_words(words: np.ndarray) -> np.random.Generator:
    words = np.asarray(words, dtype=np.uint64)
    if words.size != 6:
        raise CheckpointError(f"rng state needs 6 words, got {words.size}")
    w = [int(v) for v in words]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return rng
