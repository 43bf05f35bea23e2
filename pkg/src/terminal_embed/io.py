"""On-disk formats: point files (binary or CSV) and index files."""

import csv
import io
import math
import struct

import numpy as np

from .config import Config
from .errors import FormatError
from .geometry import Partition, as_array
from .medjl import MedianEnsemble
from .partition_tree import PartitionTree, TreeNode
from .sketch import Sketch

POINTS_MAGIC = b"TEMP"
INDEX_MAGIC = b"TEMB"
POINTS_VERSION = 1
INDEX_VERSION = 1

# CRC-64/ECMA-182, reflected form (as used by xz)
_CRC_POLY = 0xC96C5795D7870F42


def _crc_table():
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _crc_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _CRC_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


# -- point files ------------------------------------------------------------

def write_points(path, X):
    X = np.asarray(X, dtype="<f8")
    if X.ndim != 2:
        raise ValueError("expected a 2-D array")
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC + struct.pack("<IQQ", POINTS_VERSION, *X.shape))
        fh.write(np.ascontiguousarray(X).tobytes())


def read_points(path, allow_empty=False) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == POINTS_MAGIC:
        X = _parse_binary(data)
    else:
        X = _parse_csv(data)
    if X.shape[0] == 0 and not allow_empty:
        raise FormatError("point file is empty")
    if not np.all(np.isfinite(X)):
        raise FormatError("point file contains NaN or infinite coordinates")
    return X


def _parse_binary(data):
    head = 4 + struct.calcsize("<IQQ")
    if len(data) < head:
        raise FormatError("truncated header")
    version, n, d = struct.unpack_from("<IQQ", data, 4)
    if version != POINTS_VERSION:
        raise FormatError(f"unsupported point-file version {version}")
    if len(data) != head + 8 * n * d:
        raise FormatError(f"expected {n}x{d} doubles, file size disagrees")
    return np.frombuffer(data, dtype="<f8", offset=head).reshape(n, d).astype(np.float64)


def _parse_csv(data):
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("not a binary point file and not ASCII CSV") from None
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            rows.append([_strict_float(c) for c in row])
        except ValueError as err:
            raise FormatError(f"csv line {lineno}: {err}") from None
        if len(rows[-1]) != len(rows[0]):
            raise FormatError(f"csv line {lineno}: expected {len(rows[0])} columns")
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=np.float64)


def _strict_float(cell):
    s = cell.strip()
    # float() would also take "1_000" and "nan"; only plain decimals pass
    if not s or any(c not in "0123456789+-.eE" for c in s):
        raise ValueError(f"bad number {cell!r}")
    return float(s)


# -- index files ------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v):
        self.buf.write(struct.pack("<Q", v))

    def f64(self, v):
        self.buf.write(struct.pack("<d", v))

    def blob(self, b):
        self.u64(len(b))
        self.buf.write(b)

    def array(self, a, dtype):
        a = np.ascontiguousarray(a, dtype=dtype)
        self.u32(a.ndim)
        for s in a.shape:
            self.u64(s)
        self.buf.write(a.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, size):
        if self.pos + size > len(self.data):
            raise FormatError("index file is truncated")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def blob(self):
        return self.take(self.u64())

    def array(self, dtype):
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = math.prod(shape)
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _write_tree(w, tree):
    w.u64(tree.seed)
    w.f64(tree.delta)
    w.u64(tree.oversized_children)
    w.u64(len(tree.nodes))

    def walk(node):
        w.array(node.indices, "<i8")
        if node.is_leaf:
            return
        w.f64(node.r_apx)
        w.array(node.c_low.labels, "<i8")
        w.array(node.c_high.labels, "<i8")
        w.array(node.reps, "<i8")
        for child in node.children():
            walk(child)

    walk(tree.root)


def _read_tree(r, points):
    seed, delta, oversized, count = r.u64(), r.f64(), r.u64(), r.u64()
    tree = PartitionTree(None, points, delta, seed, oversized_children=oversized)

    def walk():
        node = TreeNode(len(tree.nodes), r.array("<i8"))
        tree.nodes.append(node)
        if node.is_leaf:
            return node
        node.r_apx = r.f64()
        node.c_low = Partition(r.array("<i8"))
        node.c_high = Partition(r.array("<i8"))
        node.reps = r.array("<i8")
        node.children_low = [walk() for _ in range(node.c_low.num_blocks)]
        node.child_rep = walk()
        return node

    tree.root = walk()
    if len(tree.nodes) != count:
        raise FormatError("tree node count does not match header")
    return tree


def dump_index(index) -> bytes:
    w = _Writer()
    w.buf.write(INDEX_MAGIC)
    w.u32(INDEX_VERSION)
    w.blob(index.cfg.to_text().encode("utf-8"))
    w.array(index.X_input, "<f8")
    w.array(index.keep, "<i8")
    w.array(index.remap, "<i8")
    w.u64(index.sketch.seed)
    w.array(index.sketch.matrix, "<f8")
    _write_tree(w, index.tree)
    E = index.ensemble
    w.u32(0 if E is None else 1)
    if E is not None:
        w.u64(E.seed)
        w.f64(E.frobenius_cap)
        w.array(E.sketches, "<f8")
    body = w.buf.getvalue()
    return body + struct.pack("<Q", crc64(body))


def load_index(data: bytes):
    from .terminal import TerminalEmbedding

    if len(data) < 16 or data[:4] != INDEX_MAGIC:
        raise FormatError("not an index file")
    body, trailer = data[:-8], data[-8:]
    if struct.unpack("<Q", trailer)[0] != crc64(body):
        raise FormatError("index checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    cfg = Config.from_text(r.blob().decode("utf-8"))
    X = r.array("<f8")
    keep, remap = r.array("<i8"), r.array("<i8")
    sketch_seed = r.u64()
    sketch = Sketch(r.array("<f8"), sketch_seed)
    points = as_array(X[keep])
    tree = _read_tree(r, points)
    ensemble = None
    if r.u32():
        seed, cap = r.u64(), r.f64()
        ensemble = MedianEnsemble(r.array("<f8"), cap, seed)
    if r.pos != len(body):
        raise FormatError("trailing bytes in index file")
    return TerminalEmbedding(X, cfg, sketch, tree, keep, remap, ensemble)


def save_index(path, index):
    with open(path, "wb") as fh:
        fh.write(dump_index(index))


def read_index(path):
    with open(path, "rb") as fh:
        return load_index(fh.read())
