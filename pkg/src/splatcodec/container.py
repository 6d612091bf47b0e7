"""Byte layout of the compressed container.

::

    "MGS2" u16 version
    section*  := u8 id, u32 length, payload      (ids 1..6, fixed order)

    1 octree    octree header + range-coded occupancy
    2 flags     u16 RAHT channel bitmask
    3 dc        f32 per RAHT channel
    4 groups    per group, channel-major: u8 b, f32 min, f32 max, u32 n, coded, low bits
    5 sh        u32 k, u32 r, u16 D, f32 entries, u32 n_mask, mask stream, index stream
    6 metadata  zlib( search settings, Q matrix, every frequency table )

All integers are little endian.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .entropy import FrequencyTable

MAGIC = b"MGS2"
VERSION = 1
SECTION_IDS = {"octree": 1, "flags": 2, "dc": 3, "groups": 4, "sh": 5, "metadata": 6}
SECTION_ORDER = tuple(SECTION_IDS)
NORM_IDS = {"l1": 0, "l2": 1, "linf": 2}
GROUP_HEADER = struct.Struct("<BffI")
SH_HEADER = struct.Struct("<IIH")
_META_HEAD = struct.Struct("<dHBBBIHH")


class ContainerError(ValueError):
    """Malformed, truncated or unsupported container."""


class Reader:
    def __init__(self, buf, what="container"):
        self.buf = memoryview(bytes(buf))
        self.pos = 0
        self.what = what

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise ContainerError(f"truncated {self.what}: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos: self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise ContainerError(f"{len(self.buf) - self.pos} trailing bytes in {self.what}")


def pack_sections(sections):
    """``sections`` maps every name in SECTION_ORDER to its payload bytes."""
    out = [MAGIC, struct.pack("<H", VERSION)]
    for name in SECTION_ORDER:
        payload = sections[name]
        out.append(struct.pack("<BI", SECTION_IDS[name], len(payload)))
        out.append(payload)
    return b"".join(out)


def unpack_sections(buf):
    r = Reader(buf)
    if r.take(4) != MAGIC:
        raise ContainerError("bad magic: not an MGS2 container")
    (version,) = r.unpack(struct.Struct("<H"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out = {}
    for name in SECTION_ORDER:
        sid, n = r.unpack(struct.Struct("<BI"))
        if sid != SECTION_IDS[name]:
            raise ContainerError(f"expected section {name} (id {SECTION_IDS[name]}), found id {sid}")
        out[name] = r.take(n)
    r.done()
    return out


def section_sizes(buf):
    return {k: len(v) + 5 for k, v in unpack_sections(buf).items()}


@dataclass
class Metadata:
    tau: float
    blocks: int
    depth: int
    norm: str
    sh_degree: int
    leaf_count: int
    q: np.ndarray                      # (C, B_max) uint8
    group_tables: list                 # per channel: FrequencyTable or None
    occupancy_model: bytes = b""
    mask_table: FrequencyTable | None = None
    index_table: FrequencyTable | None = None
    extra: dict = field(default_factory=dict)


def _table_bytes(t):
    return b"" if t is None else t.to_bytes()


def pack_metadata(meta):
    q = np.asarray(meta.q, dtype=np.uint8)
    head = _META_HEAD.pack(
        meta.tau, meta.blocks, meta.depth, NORM_IDS[meta.norm], meta.sh_degree, meta.leaf_count,
        q.shape[0], q.shape[1],
    )
    present = sum(1 << i for i, t in enumerate(meta.group_tables) if t is not None)
    parts = [head, q.tobytes(), struct.pack("<H", present)]
    parts += [t.to_bytes() for t in meta.group_tables if t is not None]
    parts.append(struct.pack("<I", len(meta.occupancy_model)))
    parts.append(meta.occupancy_model)
    k = meta.index_table.symbol_count if meta.index_table is not None else 0
    parts.append(struct.pack("<BI", meta.mask_table is not None, k))
    parts.append(_table_bytes(meta.mask_table))
    parts.append(_table_bytes(meta.index_table))
    return zlib.compress(b"".join(parts), 9)


def unpack_metadata(payload):
    try:
        raw = zlib.decompress(payload)
    except zlib.error as exc:
        raise ContainerError(f"metadata does not inflate: {exc}") from exc
    r = Reader(raw, "metadata")
    tau, blocks, depth, norm_id, degree, leaf_count, c, bmax = r.unpack(_META_HEAD)
    norms = {v: k for k, v in NORM_IDS.items()}
    if norm_id not in norms:
        raise ContainerError(f"unknown norm id {norm_id}")
    q = r.array(np.uint8, c * bmax).reshape(c, bmax)
    (present,) = r.unpack(struct.Struct("<H"))
    try:
        tables = [
            FrequencyTable.from_bytes(r.take(512), 256) if present >> i & 1 else None for i in range(c)
        ]
        (n_occ,) = r.unpack(struct.Struct("<I"))
        occ = r.take(n_occ)
        has_mask, k = r.unpack(struct.Struct("<BI"))
        mask_table = FrequencyTable.from_bytes(r.take(4), 2) if has_mask else None
        index_table = FrequencyTable.from_bytes(r.take(2 * k), k) if k else None
    except ValueError as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"corrupt frequency table: {exc}") from exc
    r.done()
    return Metadata(
        tau=tau, blocks=blocks, depth=depth, norm=norms[norm_id], sh_degree=degree,
        leaf_count=leaf_count, q=q, group_tables=tables, occupancy_model=occ,
        mask_table=mask_table, index_table=index_table,
    )
