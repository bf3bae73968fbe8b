"""Flat binary container for named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"KGWB"
    version u32      currently 1
    count   u64      number of tensors
    then per tensor, sorted by name:
        name_len u32, name utf-8, rank u32, extents u64 * rank,
        payload float32 * prod(extents)

Writing sorts tensors by name, so save(load(path)) reproduces ``path``
byte for byte.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import WeightLoadError

MAGIC = b"KGWB"
VERSION = 1


def save_tensors(path, named):
    """Write a mapping of name -> array-like to ``path``.

    Values are cast to float32; anything non-finite is written as-is (the
    container is a dumb transport, validation belongs to the caller).
    """
    blobs = []
    for name in sorted(named):
        arr = named[name]
        data = np.asarray(getattr(arr, "data", arr), dtype="<f4")
        raw = name.encode("utf-8")
        head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", data.ndim)
        head += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
        blobs.append(head + data.tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(blobs)))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    """Read a container written by :func:`save_tensors`.

    Returns a dict of name -> float32 ndarray in file order. Raises
    WeightLoadError on a bad magic, version, or truncated payload.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise WeightLoadError(f"{path}: not a weight container (bad magic)")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise WeightLoadError(f"{path}: unsupported container version {version}")
    out = {}
    off = 16
    for i in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off) if rank else ()
            off += 8 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = off + 4 * n
            if end > len(buf):
                raise struct.error("payload past end of file")
            data = np.frombuffer(buf[off:end], dtype="<f4").reshape(shape).copy()
            off = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise WeightLoadError(f"{path}: truncated or corrupt at tensor {i}: {exc}") from None
        out[name] = data
    if off != len(buf):
        raise WeightLoadError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return out
