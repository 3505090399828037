"""Binary and text serialization for EPGs, embeddings, trajectories,
descriptor artifacts, and PLY point clouds.

All binary formats are little-endian, versioned by a magic string, and end
with a CRC32 over everything before it; loaders reject anything they cannot
fully validate. Byte layouts are documented in FORMATS.md. Writes go
through a temp file and an atomic rename.
"""

import os
import struct
import zlib

import numpy as np

from .builder import Epg, EpgNode, Frame
from .descriptor import PcaTransform, VladVocabulary
from .grid import GridParams, Pose, PoseKey, quaternion_from_rotation
from .reloc import Bundle

MAGIC_EMBEDDING = b"EPGEMB"
MAGIC_EPG = b"EPGMAP"
MAGIC_VOCAB = b"EPGVOC"
MAGIC_PCA = b"EPGPCA"
MAGIC_BUNDLE = b"EPGBND"
VERSION = 1


class FormatError(ValueError):
    pass


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class _Reader:
    """Cursor over a fully validated (magic + CRC) binary payload."""

    def __init__(self, path, magic):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < len(magic) + 6:
            raise FormatError(f"{path}: file truncated")
        if raw[: len(magic)] != magic:
            raise FormatError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
        payload, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{path}: checksum mismatch")
        self.buf = payload
        self.pos = len(magic)
        self.path = path
        version = self.u16()
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: file truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def string(self):
        return self.take(self.u16()).decode("utf-8")

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


class _Writer:
    def __init__(self, magic):
        self.parts = [magic, struct.pack("<H", VERSION)]

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def string(self, s):
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"string too long ({len(raw)} bytes)")
        self.u16(len(raw))
        self.parts.append(raw)

    def array(self, arr, dtype):
        self.parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def dump(self, path):
        payload = b"".join(self.parts)
        _atomic_write(path, payload + struct.pack("<I", zlib.crc32(payload)))


# -- embedding files ---------------------------------------------------------

def save_embeddings(path, ids, matrix):
    """Write an id-indexed row matrix; dtype must be float16 or float32."""
    matrix = np.asarray(matrix)
    if matrix.dtype == np.float16:
        bits = 16
    elif matrix.dtype == np.float32:
        bits = 32
    else:
        raise FormatError(f"embedding dtype must be float16/float32, got {matrix.dtype}")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise FormatError("matrix must be 2D with one row per id")
    w = _Writer(MAGIC_EMBEDDING)
    w.u8(bits)
    w.u8(0)
    w.u32(matrix.shape[0])
    w.u32(matrix.shape[1])
    for fid in ids:
        w.string(fid)
    w.array(matrix, f"<f{bits // 8}")
    w.dump(path)


def load_embeddings(path):
    """Read (ids, matrix) back; the matrix keeps its stored precision."""
    r = _Reader(path, MAGIC_EMBEDDING)
    bits = r.u8()
    if bits not in (16, 32):
        raise FormatError(f"{path}: bad element width {bits}")
    r.u8()
    rows = r.u32()
    dim = r.u32()
    ids = [r.string() for _ in range(rows)]
    matrix = r.array(f"<f{bits // 8}", rows * dim).reshape(rows, dim)
    r.done()
    return ids, matrix


# -- EPG files ---------------------------------------------------------------

def save_epg(path, epg):
    nodes = epg.nodes_in_order()
    sem_dim = nodes[0].semantic.shape[0] if nodes else 0
    loc_dim = nodes[0].localization.shape[0] if nodes else 0
    w = _Writer(MAGIC_EPG)
    w.f64(epg.params.dl)
    w.f64(epg.params.d_theta)
    w.f64(epg.params.d_phi)
    w.u32(len(nodes))
    w.u32(sem_dim)
    w.u32(loc_dim)
    w.u32(len(epg.session_boundaries))
    for b in epg.session_boundaries:
        w.u32(b)
    for node in nodes:
        w.array(np.array(node.key, dtype=np.int64), "<i8")
        w.array(node.pose.rotation.reshape(9), "<f8")
        w.array(node.pose.translation, "<f8")
        w.f64(node.timestamp)
        w.f64(node.score)
        w.u32(node.insertion_index)
        w.string(node.frame_id)
        if node.semantic.shape[0] != sem_dim or node.localization.shape[0] != loc_dim:
            raise FormatError("inconsistent embedding dimensions across nodes")
        w.array(node.semantic, "<f2")
        w.array(node.localization, "<f4")
    w.dump(path)


def load_epg(path):
    r = _Reader(path, MAGIC_EPG)
    params = GridParams(r.f64(), r.f64(), r.f64())
    count = r.u32()
    sem_dim = r.u32()
    loc_dim = r.u32()
    boundaries = [r.u32() for _ in range(r.u32())]
    epg = Epg(params)
    max_index = -1
    for _ in range(count):
        key = PoseKey(*(int(v) for v in r.array("<i8", 5)))
        rotation = r.array("<f8", 9).reshape(3, 3)
        translation = r.array("<f8", 3)
        timestamp = r.f64()
        score = r.f64()
        insertion_index = r.u32()
        frame_id = r.string()
        semantic = r.array("<f2", sem_dim)
        localization = r.array("<f4", loc_dim)
        if key in epg.nodes:
            raise FormatError(f"{path}: duplicate key {key}")
        node = EpgNode(
            key=key,
            pose=Pose(rotation, translation),
            timestamp=timestamp,
            frame_id=frame_id,
            semantic=semantic,
            localization=localization,
            insertion_index=insertion_index,
            score=score,
        )
        epg.nodes[key] = node
        epg.order.append(key)
        max_index = max(max_index, insertion_index)
    r.done()
    for b in boundaries:
        if b >= len(epg.order):
            raise FormatError(f"{path}: session boundary {b} out of range")
    epg.session_boundaries = boundaries
    epg._commit_counter = max_index + 1
    return epg


# -- trajectories ------------------------------------------------------------

def save_trajectory(path, frames):
    """One line per frame: timestamp, translation, quaternion xyzw, frame id."""
    lines = ["# timestamp tx ty tz qx qy qz qw frame_id"]
    for fr in frames:
        q = quaternion_from_rotation(fr.pose.rotation)
        t = fr.pose.translation
        fields = [fr.timestamp, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
        lines.append(" ".join(f"{v:.17g}" for v in fields) + f" {fr.frame_id}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_trajectory(path):
    frames = []
    prev_ts = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise FormatError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                ts = float(parts[0])
                tx, ty, tz = (float(v) for v in parts[1:4])
                q = [float(v) for v in parts[4:8]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            norm = float(np.linalg.norm(q))
            if abs(norm - 1.0) > 1e-3:
                raise FormatError(f"{path}:{lineno}: quaternion norm {norm:.6f} too far from 1")
            if prev_ts is not None and ts < prev_ts:
                raise FormatError(f"{path}:{lineno}: timestamp {ts} before {prev_ts}")
            prev_ts = ts
            frames.append(Frame(ts, Pose.from_quaternion(q, (tx, ty, tz)), parts[8]))
    return frames


# -- PLY point clouds --------------------------------------------------------

_PLY_SCALARS = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def save_pointcloud(path, points, binary=True):
    """Write x/y/z float32 vertices, binary little-endian by default."""
    pts = np.ascontiguousarray(points, dtype=np.float32).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    if binary:
        _atomic_write(path, header.encode("ascii") + pts.astype("<f4").tobytes())
    else:
        body = "".join(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n" for p in pts)
        _atomic_write(path, (header + body).encode("ascii"))


def load_pointcloud(path):
    """Read x/y/z from an ASCII or binary little-endian PLY vertex element."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[: end + 11].decode("ascii", errors="replace")
    body = raw[end + 11 :]

    fmt = None
    elements = []  # (name, count, [(prop_name, type_str)])
    for line in header.splitlines()[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list:" + " ".join(tok[2:-1])))
            else:
                elements[-1][2].append((tok[2], tok[1]))
        elif tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported format '{fmt}'")

    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            return _parse_vertices(path, fmt, body, offset, count, props)
        # skip earlier elements; only possible for fixed-size properties
        if fmt == "ascii":
            raise FormatError(f"{path}: vertex element must come first in ascii files")
        stride = 0
        for pname, ptype in props:
            if ptype.startswith("list:"):
                raise FormatError(
                    f"{path}: cannot skip element '{name}' with list property '{pname}'"
                )
            stride += _PLY_SCALARS[ptype][1]
        offset += stride * count
    raise FormatError(f"{path}: no vertex element")


def _parse_vertices(path, fmt, body, offset, count, props):
    for axis in ("x", "y", "z"):
        match = [t for n, t in props if n == axis]
        if not match:
            raise FormatError(f"{path}: vertex element lacks property '{axis}'")
        if match[0] not in ("float", "float32"):
            raise FormatError(
                f"{path}: vertex property '{axis}' has type '{match[0]}', expected float32"
            )
    for pname, ptype in props:
        if ptype.startswith("list:"):
            raise FormatError(f"{path}: list property '{pname}' in vertex element unsupported")
        if ptype not in _PLY_SCALARS:
            raise FormatError(f"{path}: unknown property type '{ptype}' on '{pname}'")

    if fmt == "ascii":
        text = body.decode("ascii", errors="replace")
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if len(rows) < count:
            raise FormatError(f"{path}: expected {count} vertex rows, found {len(rows)}")
        cols = {n: i for i, (n, _) in enumerate(props)}
        out = np.empty((count, 3), dtype=np.float32)
        for r, row in enumerate(rows[:count]):
            if len(row) != len(props):
                raise FormatError(f"{path}: vertex row {r} has {len(row)} fields")
            out[r] = [np.float32(row[cols["x"]]), np.float32(row[cols["y"]]), np.float32(row[cols["z"]])]
        return out

    dtype = np.dtype([(n, _PLY_SCALARS[t][0]) for n, t in props])
    need = offset + dtype.itemsize * count
    if len(body) < need:
        raise FormatError(f"{path}: binary vertex data truncated")
    rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
    return np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float32)


# -- descriptor artifacts ----------------------------------------------------

def save_vocabulary(path, vocab):
    w = _Writer(MAGIC_VOCAB)
    w.u32(vocab.k)
    w.u32(vocab.dim)
    w.array(vocab.centroids, "<f8")
    w.dump(path)


def load_vocabulary(path):
    r = _Reader(path, MAGIC_VOCAB)
    k = r.u32()
    d = r.u32()
    centroids = r.array("<f8", k * d).reshape(k, d)
    r.done()
    return VladVocabulary(centroids=centroids)


def save_pca(path, transform):
    w = _Writer(MAGIC_PCA)
    w.u32(transform.dim_out)
    w.u32(transform.dim_in)
    w.array(transform.mean, "<f8")
    w.array(transform.basis, "<f8")
    w.dump(path)


def load_pca(path):
    r = _Reader(path, MAGIC_PCA)
    rank = r.u32()
    n = r.u32()
    mean = r.array("<f8", n)
    basis = r.array("<f8", rank * n).reshape(rank, n)
    r.done()
    return PcaTransform(mean=mean, basis=basis)


# -- re-localization bundles -------------------------------------------------

def save_bundle(path, bundle, frame_ids=None):
    ids = frame_ids if frame_ids is not None else [f"q{i}" for i in range(len(bundle.poses))]
    if len(ids) != len(bundle.poses):
        raise FormatError("one frame id per bundle pose required")
    dim = int(np.asarray(bundle.queries[0]).shape[0])
    w = _Writer(MAGIC_BUNDLE)
    w.u32(len(bundle.poses))
    w.u32(dim)
    for fid, pose in zip(ids, bundle.poses):
        w.string(fid)
        w.array(pose.rotation.reshape(9), "<f8")
        w.array(pose.translation, "<f8")
    for q in bundle.queries:
        q = np.asarray(q, dtype=np.float32)
        if q.shape != (dim,):
            raise FormatError("inconsistent bundle query dimensions")
        w.array(q, "<f4")
    w.dump(path)


def load_bundle(path):
    """Returns (bundle, frame_ids)."""
    r = _Reader(path, MAGIC_BUNDLE)
    count = r.u32()
    dim = r.u32()
    if count < 1:
        raise FormatError(f"{path}: empty bundle")
    ids, poses = [], []
    for _ in range(count):
        ids.append(r.string())
        rotation = r.array("<f8", 9).reshape(3, 3)
        translation = r.array("<f8", 3)
        poses.append(Pose(rotation, translation))
    queries = [r.array("<f4", dim) for _ in range(count)]
    r.done()
    return Bundle(poses=poses, queries=queries), ids
