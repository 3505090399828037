"""Writer (and sanity reader) for the epg embedding file wire format.

Layout per the primary repo's FORMATS.md: magic "EPGEMB", version u16,
element width u8 (16/32), reserved u8, rows u32, dim u32, a frame-id table
of u16-length UTF-8 strings, the row-major float matrix, and a trailing
CRC32 over everything before it. Little-endian throughout. Files are
written to a temp path and renamed into place.
"""

import os
import struct
import zlib

import numpy as np

MAGIC = b"EPGEMB"
VERSION = 1


def write_embeddings(path, ids, matrix):
    matrix = np.asarray(matrix)
    if matrix.dtype == np.float16:
        bits = 16
    elif matrix.dtype == np.float32:
        bits = 32
    else:
        raise ValueError(f"embedding dtype must be float16/float32, got {matrix.dtype}")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError("matrix must be 2D with one row per id")
    parts = [
        MAGIC,
        struct.pack("<HBBII", VERSION, bits, 0, matrix.shape[0], matrix.shape[1]),
    ]
    for fid in ids:
        raw = str(fid).encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"frame id too long ({len(raw)} bytes)")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(matrix, dtype=f"<f{bits // 8}").tobytes())
    payload = b"".join(parts)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload + struct.pack("<I", zlib.crc32(payload)))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_embeddings(path):
    """Read back (ids, matrix); validates magic, version, and CRC."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 22 or raw[:6] != MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    payload, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: checksum mismatch")
    version, bits, _, rows, dim = struct.unpack("<HBBII", payload[6:18])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 18
    ids = []
    for _ in range(rows):
        (n,) = struct.unpack("<H", payload[pos : pos + 2])
        pos += 2
        ids.append(payload[pos : pos + n].decode("utf-8"))
        pos += n
    dt = np.dtype(f"<f{bits // 8}")
    matrix = np.frombuffer(payload, dtype=dt, count=rows * dim, offset=pos).reshape(rows, dim)
    return ids, matrix.copy()
