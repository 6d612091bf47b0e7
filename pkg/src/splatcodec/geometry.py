"""Voxelisation, co-voxel deduplication and the octree occupancy coder.

Morton keys interleave bits as ``x | y << 1 | z << 2`` per level, so the
child octant index inside an occupancy byte is ``x + 2y + 4z`` and sorting
keys ascending is the same as breadth-first leaf order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import entropy
from .gs_model import GaussianCloud

MAX_DEPTH = 21
CONTEXT_MIN_COUNT = 16
CODER_INTERNAL = 0


class GeometryError(ValueError):
    pass


def _part1by2(v):
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact1by2(v):
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(ijk):
    ijk = np.asarray(ijk)
    return _part1by2(ijk[:, 0]) | (_part1by2(ijk[:, 1]) << np.uint64(1)) | (_part1by2(ijk[:, 2]) << np.uint64(2))


def morton_decode(keys):
    keys = np.asarray(keys, dtype=np.uint64)
    return np.stack(
        [_compact1by2(keys), _compact1by2(keys >> np.uint64(1)), _compact1by2(keys >> np.uint64(2))], axis=1
    ).astype(np.int64)


def _f32_down(v):
    f = np.float32(v)
    return float(np.nextafter(f, np.float32(-np.inf))) if float(f) > v else float(f)


def _f32_up(v):
    f = np.float32(v)
    return float(np.nextafter(f, np.float32(np.inf))) if float(f) < v else float(f)


def compute_aabb(positions, margin=1e-6):
    """Tight box grown by a relative margin, rounded outward to float32."""
    p = np.asarray(positions, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise GeometryError("non-finite position")
    lo = p.min(axis=0)
    hi = p.max(axis=0)
    span = max(float((hi - lo).max()), float(np.abs(p).max()) * 1e-3, 1e-3)
    pad = margin * span
    lo = np.array([_f32_down(v - pad) for v in lo])
    hi = np.array([_f32_up(v + pad) for v in hi])
    return lo, hi


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    depth: int
    keys: np.ndarray  # uint64, strictly increasing

    def __post_init__(self):
        if not 1 <= self.depth <= MAX_DEPTH:
            raise GeometryError(f"depth must be in [1, {MAX_DEPTH}], got {self.depth}")
        keys = np.asarray(self.keys, dtype=np.uint64)
        if keys.size and np.any(keys[1:] <= keys[:-1]):
            raise GeometryError("voxel keys must be strictly increasing")
        if keys.size and int(keys[-1]) >= 1 << (3 * self.depth):
            raise GeometryError("voxel key exceeds the grid depth")
        lo = np.asarray(self.aabb_min, dtype=np.float64)
        hi = np.asarray(self.aabb_max, dtype=np.float64)
        if not np.all(hi > lo):
            raise GeometryError("aabb_max must exceed aabb_min on every axis")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "aabb_min", lo)
        object.__setattr__(self, "aabb_max", hi)

    def __len__(self):
        return self.keys.size

    @property
    def voxel_size(self):
        return (self.aabb_max - self.aabb_min) / float(1 << self.depth)

    def coords(self):
        return morton_decode(self.keys)

    def centers(self):
        return self.aabb_min + (self.coords() + 0.5) * self.voxel_size


def voxelize(positions, depth, aabb=None):
    """Map positions to Morton keys; returns the grid and a point->voxel map."""
    p = np.asarray(positions, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise GeometryError("non-finite position")
    if not 1 <= depth <= MAX_DEPTH:
        raise GeometryError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    lo, hi = compute_aabb(p) if aabb is None else (np.asarray(aabb[0], float), np.asarray(aabb[1], float))
    size = (hi - lo) / float(1 << depth)
    ijk = np.floor((p - lo) / size)
    ijk = np.clip(ijk, 0, (1 << depth) - 1).astype(np.int64)
    keys = morton_encode(ijk)
    uniq, assignment = np.unique(keys, return_inverse=True)
    return VoxelGrid(lo, hi, depth, uniq), assignment.ravel()


def _group_mean(values, assignment, m):
    values = np.asarray(values, dtype=np.float64)
    counts = np.bincount(assignment, minlength=m).astype(np.float64)
    out = np.empty((m, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(assignment, weights=values[:, c], minlength=m) / counts
    return out


def dedup_average(cloud, grid, assignment):
    """Average every attribute over each voxel; positions become voxel centres."""
    m = len(grid)
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.size != len(cloud):
        raise GeometryError("assignment length differs from cloud size")
    if m and np.bincount(assignment, minlength=m).min() == 0:
        raise GeometryError("assignment is not surjective onto the voxel set")
    # q and -q are the same rotation; average on the w >= 0 hemisphere
    quats = cloud.quaternions.astype(np.float64)
    quats = np.where(quats[:, :1] < 0, -quats, quats)
    return GaussianCloud(
        positions=grid.centers(),
        quaternions=_group_mean(quats, assignment, m),
        log_scales=_group_mean(cloud.log_scales, assignment, m),
        opacity_logits=_group_mean(cloud.opacity_logits, assignment, m),
        sh_dc=_group_mean(cloud.sh_dc, assignment, m),
        sh_rest=_group_mean(cloud.sh_rest, assignment, m) if cloud.rest_dim else np.zeros((m, 0)),
        sh_degree=cloud.sh_degree,
    )


@dataclass(frozen=True, eq=False)
class OctreeStream:
    occupancy: bytes
    depth: int
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    leaf_count: int


def encode_octree(grid):
    """Breadth-first child masks for every occupied node above the leaves."""
    keys = grid.keys
    d = grid.depth
    chunks = []
    for level in range(d):
        child = keys >> np.uint64(3 * (d - level - 1))
        child = np.unique(child)
        parent = child >> np.uint64(3)
        bits = (np.uint64(1) << (child & np.uint64(7))).astype(np.uint8)
        starts = np.flatnonzero(np.concatenate([[True], parent[1:] != parent[:-1]]))
        chunks.append(np.bitwise_or.reduceat(bits, starts).astype(np.uint8))
    occ = np.concatenate(chunks) if chunks else np.zeros(0, np.uint8)
    return OctreeStream(occ.tobytes(), d, grid.aabb_min, grid.aabb_max, len(grid))


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)
_BITS = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1, bitorder="little").astype(bool)


def _expand(nodes, masks):
    """Children keys of ``nodes`` given their occupancy masks, in Morton order."""
    sel = _BITS[masks]
    rows, octs = np.nonzero(sel)
    return (nodes[rows] << np.uint64(3)) | octs.astype(np.uint64)


def decode_octree(stream):
    occ = np.frombuffer(bytes(stream.occupancy), dtype=np.uint8)
    nodes = np.zeros(1, dtype=np.uint64)
    pos = 0
    for level in range(stream.depth):
        n = nodes.size
        if pos + n > occ.size:
            raise GeometryError(f"truncated occupancy stream at level {level}")
        masks = occ[pos: pos + n]
        if np.any(masks == 0):
            raise GeometryError(f"zero occupancy byte at level {level}")
        nodes = _expand(nodes, masks)
        pos += n
    if pos != occ.size:
        raise GeometryError(f"{occ.size - pos} trailing bytes after the last octree level")
    if nodes.size != stream.leaf_count:
        raise GeometryError(f"leaf count mismatch: decoded {nodes.size}, header says {stream.leaf_count}")
    return VoxelGrid(stream.aabb_min, stream.aabb_max, stream.depth, nodes)


def level_sizes(occ, depth):
    """Number of occupancy bytes per level, derived from the bytes themselves."""
    sizes = []
    n = 1
    pos = 0
    for _ in range(depth):
        sizes.append(n)
        nxt = int(_POPCOUNT[occ[pos: pos + n]].sum())
        pos += n
        n = nxt
    return sizes


def occupancy_contexts(occ, depth):
    """Parent occupancy byte of every node; 0 for the root."""
    occ = np.asarray(occ, dtype=np.uint8)
    ctx = np.zeros(occ.size, dtype=np.int64)
    pos = 0
    prev = None
    for n in level_sizes(occ, depth):
        if prev is not None:
            ctx[pos: pos + n] = np.repeat(prev.astype(np.int64), _POPCOUNT[prev])
        prev = occ[pos: pos + n]
        pos += n
    return ctx


@dataclass(frozen=True, eq=False)
class OccupancyModel:
    """Per-parent-byte tables; sparse contexts share the fallback table."""

    context_values: np.ndarray  # parent bytes owning a table
    tables: list                # fallback first, then one per context value

    def table_index(self, contexts):
        lut = np.zeros(256, dtype=np.int64)
        lut[self.context_values] = np.arange(1, self.context_values.size + 1)
        return lut[contexts]

    def to_bytes(self):
        out = [struct.pack("<H", self.context_values.size), self.context_values.astype(np.uint8).tobytes()]
        out += [t.to_bytes() for t in self.tables]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf, offset=0):
        (n,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        values = np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset).astype(np.int64)
        offset += n
        tables = []
        for _ in range(n + 1):
            tables.append(entropy.FrequencyTable.from_bytes(buf[offset: offset + 512], 256))
            offset += 512
        return cls(values, tables), offset


def fit_occupancy_model(occ, depth, min_count=CONTEXT_MIN_COUNT):
    occ = np.frombuffer(bytes(occ), dtype=np.uint8).astype(np.int64)
    ctx = occupancy_contexts(occ, depth)
    counts = np.bincount(ctx, minlength=256)
    counts[0] = 0
    values = np.flatnonzero(counts >= min_count)
    sparse = ~np.isin(ctx, values)
    tables = [entropy.build_table(occ[sparse], 256)]
    tables += [entropy.build_table(occ[ctx == v], 256) for v in values]
    return OccupancyModel(values, tables), ctx


def encode_occupancy(stream, min_count=CONTEXT_MIN_COUNT):
    model, ctx = fit_occupancy_model(stream.occupancy, stream.depth, min_count)
    occ = np.frombuffer(bytes(stream.occupancy), dtype=np.uint8).astype(np.int64)
    coded = entropy.encode_with_contexts(occ, model.table_index(ctx), model.tables)
    return coded, model


def decode_occupancy(coded, model, depth, leaf_count):
    dec = entropy.RangeDecoder(coded)
    parts = []
    prev = None
    for level in range(depth):
        if prev is None:
            ctx = np.zeros(1, dtype=np.int64)
        else:
            ctx = np.repeat(prev, _POPCOUNT[prev])
        # a level never holds more nodes than there are leaves
        if ctx.size > leaf_count:
            raise GeometryError(f"occupancy level {level} exceeds the declared leaf count")
        syms = dec.decode(ctx.size, model.table_index(ctx), model.tables)
        if np.any(syms == 0):
            raise GeometryError(f"zero occupancy byte at level {level}")
        parts.append(syms)
        prev = syms
    if prev is not None and int(_POPCOUNT[prev].sum()) != leaf_count:
        raise GeometryError("leaf count mismatch in occupancy stream")
    dec.finish()
    return np.concatenate(parts).astype(np.uint8).tobytes()


_HEADER = struct.Struct("<B6fIB")


def pack_octree(stream, coded):
    head = _HEADER.pack(
        stream.depth, *np.asarray(stream.aabb_min, np.float32), *np.asarray(stream.aabb_max, np.float32),
        stream.leaf_count, CODER_INTERNAL,
    )
    return head + coded


def unpack_octree_header(buf):
    if len(buf) < _HEADER.size:
        raise GeometryError("truncated octree header")
    vals = _HEADER.unpack_from(buf, 0)
    depth = vals[0]
    lo = np.array(vals[1:4], dtype=np.float64)
    hi = np.array(vals[4:7], dtype=np.float64)
    leaf_count, coder = vals[7], vals[8]
    if coder != CODER_INTERNAL:
        raise GeometryError(f"unsupported geometry coder id {coder}")
    if not 1 <= depth <= MAX_DEPTH:
        raise GeometryError(f"bad octree depth {depth}")
    return depth, lo, hi, leaf_count, buf[_HEADER.size:]
