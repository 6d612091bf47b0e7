"""Encode and decode pipeline.

``prepare`` runs everything that does not depend on the bit-width matrix
(pruning, voxelization, RAHT, loss tables, SH clustering) so the search can
re-pack a scene many times cheaply with ``encode_prepared``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import container as ct
from .entropy import EntropyError, RangeDecoder, build_table, encode
from .geometry import (
    CONTEXT_MIN_COUNT,
    GeometryError,
    OccupancyModel,
    OctreeStream,
    decode_occupancy,
    decode_octree,
    dedup_average,
    encode_occupancy,
    encode_octree,
    pack_octree,
    unpack_octree_header,
    voxelize,
)
from .gs_model import GaussianCloud, rest_dim
from .quantizer import GroupPartition, QuantizedGroup, build_loss_table, dequantize_group, quantize_all
from .sh_vq import ShCodebook, _nearest, cached_kmeans, decode_sh, encode_sh
from .splat import importance, prune
from .transform import (
    CHANNELS,
    RahtTree,
    TransformPlan,
    channel_values,
    cloud_from_channels,
    raht_forward,
    raht_inverse,
)

C = len(CHANNELS)


@dataclass(frozen=True)
class CodecConfig:
    depth: int = 12
    blocks: int = 40
    codebook: int = 4096
    norm: str = "l2"
    beta: float = 0.1
    kmeans_iters: int = 10
    kmeans_batch: int = 1 << 16
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if not 1 <= self.depth <= 21:
            raise ValueError(f"depth must be in [1, 21], got {self.depth}")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if not 1 <= self.codebook <= 1 << 16:
            raise ValueError("codebook size must be in [1, 65536]")
        if self.norm not in ct.NORM_IDS:
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass(eq=False)
class Prepared:
    tau: float
    config: CodecConfig
    cloud: GaussianCloud          # deduplicated, Morton order
    tree: RahtTree | None
    octree: bytes                 # section payload
    occupancy_model: bytes
    values: np.ndarray            # (M, C)
    dc: np.ndarray                # (C,)
    ac: np.ndarray                # (C, M - 1)
    importance: np.ndarray        # (M,)
    centroids: np.ndarray         # (k, D)
    sh_assign: np.ndarray         # (M,)
    loss_raht: object = None
    loss_raw: object = None
    _sh_cache: dict = field(default_factory=dict)

    @property
    def leaf_count(self):
        return len(self.cloud)

    @property
    def raht_possible(self):
        return self.leaf_count > 1

    def stream(self, channel, raht):
        return self.ac[channel] if raht else self.values[:, channel]

    def partition(self, plan):
        lengths = [self.leaf_count - 1 if f else self.leaf_count for f in plan.raht]
        return GroupPartition.uniform(lengths, self.config.blocks)

    def variant_partition(self, raht):
        n = self.leaf_count - 1 if raht else self.leaf_count
        return GroupPartition.uniform([n] * C, self.config.blocks)

    def plan_for(self, channel_widths):
        if not self.raht_possible:
            return TransformPlan((False,) * C)
        return TransformPlan.for_widths(channel_widths)

    def loss_for(self, raht):
        return self.loss_raht if raht else self.loss_raw

    @property
    def bytes_per_vector(self):
        return 4 * self.cloud.rest_dim


def sh_codebook(cloud, config):
    """Centroids trained on the rows of ``cloud``; empty when there is no higher-degree SH."""
    d = cloud.rest_dim
    if d == 0:
        return np.zeros((0, 0), np.float32)
    k = min(config.codebook, len(cloud))
    c, _ = cached_kmeans(cloud.sh_rest, k, config.kmeans_iters, config.kmeans_batch, config.seed)
    return c.astype(np.float32)


def prepare(cloud, tau, scores, config, centroids=None, loss_tables=True):
    """Prune by ``scores`` (an ImportanceScores or an array of i_g), voxelize and transform."""
    pruned, kept = prune(cloud, scores, tau)
    i_g = getattr(scores, "i_g", scores)
    i_g = np.asarray(i_g, dtype=np.float64)[kept]
    grid, assign = voxelize(pruned.positions, config.depth)
    dedup = dedup_average(pruned, grid, assign)
    m = len(dedup)
    imp = np.full(m, -np.inf)
    np.maximum.at(imp, assign, i_g)
    stream = encode_octree(grid)
    coded, model = encode_occupancy(stream, CONTEXT_MIN_COUNT)
    values = channel_values(dedup)
    tree = RahtTree.from_grid(grid) if m > 1 else None
    if tree is not None:
        dc, ac = raht_forward(values, tree)
    else:
        dc, ac = values[0].copy(), np.zeros((C, 0))
    if centroids is None:
        centroids = sh_codebook(dedup, config)
    if dedup.rest_dim:
        centroids = np.asarray(centroids, np.float32)[: min(len(centroids), m)]
        sh_assign, _ = _nearest(dedup.sh_rest.astype(np.float64), centroids.astype(np.float64))
    else:
        centroids = np.zeros((0, 0), np.float32)
        sh_assign = np.zeros(m, dtype=np.int64)
    prep = Prepared(
        tau=tau, config=config, cloud=dedup, tree=tree, octree=pack_octree(stream, coded),
        occupancy_model=model.to_bytes(), values=values, dc=dc, ac=ac, importance=imp,
        centroids=centroids, sh_assign=sh_assign,
    )
    if loss_tables:
        if tree is not None:
            prep.loss_raht = build_loss_table(
                list(ac), prep.variant_partition(True), config.norm, config.threads
            )
        prep.loss_raw = build_loss_table(
            list(values.T), prep.variant_partition(False), config.norm, config.threads
        )
    return prep


# -- group payloads -----------------------------------------------------------


def _split_codes(codes, bits):
    """(top-byte symbols, low bits array) of a code vector."""
    codes = codes.astype(np.int64)
    if bits <= 8:
        return codes << (8 - bits), None
    low = bits - 8
    return codes >> low, codes & ((1 << low) - 1)


def _pack_low(low, width):
    if low is None or width <= 0:
        return b""
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((low[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def _unpack_low(buf, n, width):
    bits = np.unpackbits(np.frombuffer(buf, np.uint8))[: n * width].reshape(n, width).astype(np.int64)
    return bits @ (1 << np.arange(width - 1, -1, -1, dtype=np.int64))


def _coded(g):
    return g.bits > 0 and float(g.vmax) > float(g.vmin)


def encode_groups(groups):
    """Groups section payload and the per-channel tables."""
    tables = []
    split = []
    for ch in groups:
        syms = [_split_codes(g.codes, g.bits) if _coded(g) else (None, None) for g in ch]
        split.append(syms)
        live = [s for s, _ in syms if s is not None]
        tables.append(build_table(np.concatenate(live), 256) if live else None)
    out = []
    for ch, syms, table in zip(groups, split, tables):
        for g, (sym, low) in zip(ch, syms):
            coded = encode(sym, table) if sym is not None else b""
            out.append(ct.GROUP_HEADER.pack(g.bits, g.vmin, g.vmax, len(coded)))
            out.append(coded)
            if sym is not None:
                out.append(_pack_low(low, g.bits - 8))
    return b"".join(out), tables


def decode_groups(payload, partition, tables, q):
    r = ct.Reader(payload, "groups section")
    streams = []
    for i in range(partition.channel_count):
        parts = []
        for j, n in enumerate(partition.lengths(i)):
            n = int(n)
            b, lo, hi, n_coded = r.unpack(ct.GROUP_HEADER)
            if b != q[i, j] or b > 16:
                raise ct.ContainerError(f"group ({i}, {j}) width {b} disagrees with Q ({q[i, j]})")
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ct.ContainerError(f"group ({i}, {j}) has an invalid range")
            coded = r.take(n_coded)
            g = QuantizedGroup(np.empty(0, np.uint32), b, np.float32(lo), np.float32(hi), n)
            if b > 0 and hi > lo:
                if tables[i] is None:
                    raise ct.ContainerError(f"channel {i} has coded groups but no table")
                try:
                    dec = RangeDecoder(coded)
                    sym = dec.decode(n, np.zeros(n, np.int64), [tables[i]])
                    dec.finish()
                except EntropyError as exc:
                    raise ct.ContainerError(f"group ({i}, {j}): {exc}") from exc
                if b <= 8:
                    codes = sym >> (8 - b)
                else:
                    w = b - 8
                    low = _unpack_low(r.take((n * w + 7) // 8), n, w)
                    codes = (sym << w) | low
                g = QuantizedGroup(codes.astype(np.uint32), b, np.float32(lo), np.float32(hi), n)
            elif n_coded:
                raise ct.ContainerError(f"group ({i}, {j}) carries a payload it cannot use")
            parts.append(dequantize_group(g))
        streams.append(np.concatenate(parts))
    r.done()
    return streams


# -- SH section -----------------------------------------------------------------


def encode_sh_section(book, m):
    if book is None:
        return ct.SH_HEADER.pack(0, 0, 0) + struct.pack("<I", 0), None, None
    retained = book.retained_mask()
    head = ct.SH_HEADER.pack(book.k, book.r, book.dim) + book.entries.astype("<f4").tobytes()
    mask_table = index_table = None
    mask_bytes = b""
    if book.r:
        mask_table = build_table(retained.astype(np.int64), 2)
        mask_bytes = encode(retained.astype(np.int64), mask_table)
    idx = book.assignments[~retained]
    idx_bytes = b""
    if idx.size:
        index_table = build_table(idx, book.k)
        idx_bytes = encode(idx, index_table)
    body = head + struct.pack("<I", len(mask_bytes)) + mask_bytes + idx_bytes
    return body, mask_table, index_table


def decode_sh_section(payload, m, meta):
    r = ct.Reader(payload, "SH section")
    k, rr, d = r.unpack(ct.SH_HEADER)
    if d != rest_dim(meta.sh_degree):
        raise ct.ContainerError(f"SH dimension {d} does not match degree {meta.sh_degree}")
    if d == 0:
        (n_mask,) = r.unpack(struct.Struct("<I"))
        r.done()
        if k or rr or n_mask:
            raise ct.ContainerError("degree-0 model carries SH data")
        return np.zeros((m, 0))
    if rr > m or k + rr == 0 or k > 1 << 16:
        raise ct.ContainerError(f"implausible codebook sizes k={k}, r={rr} for {m} rows")
    entries = r.array("<f4", (k + rr) * d).reshape(k + rr, d)
    (n_mask,) = r.unpack(struct.Struct("<I"))
    mask_bytes = r.take(n_mask)
    idx_bytes = r.take(len(r.buf) - r.pos)
    try:
        if rr:
            if meta.mask_table is None:
                raise ct.ContainerError("retained rows without a mask table")
            dec = RangeDecoder(mask_bytes)
            retained = dec.decode(m, np.zeros(m, np.int64), [meta.mask_table]).astype(bool)
            dec.finish()
        else:
            retained = np.zeros(m, dtype=bool)
        if int(retained.sum()) != rr:
            raise ct.ContainerError("retention mask disagrees with the retained count")
        n_idx = m - rr
        a = np.empty(m, dtype=np.int64)
        a[retained] = k + np.arange(rr)
        if n_idx:
            if meta.index_table is None or meta.index_table.symbol_count != k:
                raise ct.ContainerError("missing or mismatched codebook index table")
            dec = RangeDecoder(idx_bytes)
            a[~retained] = dec.decode(n_idx, np.zeros(n_idx, np.int64), [meta.index_table])
            dec.finish()
        elif idx_bytes:
            raise ct.ContainerError("trailing bytes in SH section")
    except EntropyError as exc:
        raise ct.ContainerError(f"SH stream: {exc}") from exc
    try:
        return decode_sh(ShCodebook(entries, a, k, rr))
    except ValueError as exc:
        raise ct.ContainerError(str(exc)) from exc


# -- whole container ----------------------------------------------------------------


def _sh_book(prep, retained):
    if prep.cloud.rest_dim == 0:
        return None
    key = retained.tobytes()
    if key not in prep._sh_cache:
        if len(prep._sh_cache) > 8:
            prep._sh_cache.clear()
        prep._sh_cache[key] = encode_sh(prep.cloud.sh_rest, prep.centroids, prep.sh_assign, retained)
    return prep._sh_cache[key]


def encode_prepared(prep, q, plan, retained=None):
    """Pack a prepared scene with bit widths ``q`` (C x B_max) and transform ``plan``."""
    m = prep.leaf_count
    if m == 1 and any(plan.raht):
        raise ValueError("a single-voxel scene cannot use RAHT")
    retained = np.zeros(0, np.int64) if retained is None else np.asarray(retained, np.int64)
    part = prep.partition(plan)
    q = np.asarray(q, dtype=np.int64)
    qm = np.zeros((C, part.max_blocks), dtype=np.int64)
    for i, nb in enumerate(part.block_counts()):
        qm[i, :nb] = q[i, :nb]
    streams = [prep.stream(i, f) for i, f in enumerate(plan.raht)]
    groups = quantize_all(streams, part, qm, prep.config.threads)
    group_bytes, tables = encode_groups(groups)
    sh_bytes, mask_table, index_table = encode_sh_section(_sh_book(prep, retained), m)
    meta = ct.Metadata(
        tau=prep.tau, blocks=prep.config.blocks, depth=prep.config.depth, norm=prep.config.norm,
        sh_degree=prep.cloud.sh_degree, leaf_count=m, q=qm, group_tables=tables,
        occupancy_model=prep.occupancy_model, mask_table=mask_table, index_table=index_table,
    )
    dc = np.array([prep.dc[i] for i, f in enumerate(plan.raht) if f], dtype="<f4")
    return ct.pack_sections({
        "octree": prep.octree,
        "flags": struct.pack("<H", plan.to_mask()),
        "dc": dc.tobytes(),
        "groups": group_bytes,
        "sh": sh_bytes,
        "metadata": ct.pack_metadata(meta),
    })


def _decode_geometry(payload, meta):
    try:
        depth, lo, hi, leaf_count, coded = unpack_octree_header(payload)
        if depth != meta.depth or leaf_count != meta.leaf_count:
            raise ct.ContainerError("octree header disagrees with metadata")
        if leaf_count < 1:
            raise ct.ContainerError("empty octree")
        model, end = OccupancyModel.from_bytes(meta.occupancy_model, 0)
        if end != len(meta.occupancy_model):
            raise ct.ContainerError("trailing bytes after occupancy model")
        occ = decode_occupancy(coded, model, depth, leaf_count)
        return decode_octree(OctreeStream(occ, depth, lo, hi, leaf_count))
    except (GeometryError, EntropyError) as exc:
        raise ct.ContainerError(f"octree: {exc}") from exc
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ct.ContainerError):
            raise
        raise ct.ContainerError(f"octree: {exc}") from exc


def decode(buf):
    """Container bytes -> GaussianCloud in Morton order."""
    sec = ct.unpack_sections(buf)
    meta = ct.unpack_metadata(sec["metadata"])
    grid = _decode_geometry(sec["octree"], meta)
    m = len(grid)
    if len(sec["flags"]) != 2:
        raise ct.ContainerError("flags section must hold a u16")
    (mask,) = struct.unpack("<H", sec["flags"])
    try:
        plan = TransformPlan.from_mask(mask)
    except ValueError as exc:
        raise ct.ContainerError(str(exc)) from exc
    if m == 1 and any(plan.raht):
        raise ct.ContainerError("RAHT flag set on a single-voxel scene")
    n_raht = sum(plan.raht)
    if len(sec["dc"]) != 4 * n_raht:
        raise ct.ContainerError(f"dc section holds {len(sec['dc'])} bytes, expected {4 * n_raht}")
    dc = np.frombuffer(sec["dc"], "<f4").astype(np.float64)
    lengths = [m - 1 if f else m for f in plan.raht]
    part = GroupPartition.uniform(lengths, meta.blocks)
    if meta.q.shape != (C, part.max_blocks) or len(meta.group_tables) != C:
        raise ct.ContainerError(f"Q matrix shape {meta.q.shape} does not fit the partition")
    streams = decode_groups(sec["groups"], part, meta.group_tables, meta.q.astype(np.int64))
    rows = np.empty((m, C))
    raht_idx = [i for i, f in enumerate(plan.raht) if f]
    for i, f in enumerate(plan.raht):
        if not f:
            rows[:, i] = streams[i]
    if raht_idx:
        tree = RahtTree.from_grid(grid)
        ac = np.stack([streams[i] for i in raht_idx])
        rows[:, raht_idx] = raht_inverse(dc, ac, tree)
    sh_rest = decode_sh_section(sec["sh"], m, meta)
    if not np.all(np.isfinite(rows)):
        raise ct.ContainerError("decoded attributes are not finite")
    return cloud_from_channels(rows, grid.centers(), sh_rest, meta.sh_degree)


def info(buf):
    sec = ct.unpack_sections(buf)
    meta = ct.unpack_metadata(sec["metadata"])
    (mask,) = struct.unpack("<H", sec["flags"])
    plan = TransformPlan.from_mask(mask)
    k, r, d = ct.SH_HEADER.unpack_from(sec["sh"], 0)
    return {
        "bytes": len(buf),
        "sections": {name: len(v) + 5 for name, v in sec.items()},
        "tau": meta.tau,
        "depth": meta.depth,
        "blocks": meta.blocks,
        "norm": meta.norm,
        "sh_degree": meta.sh_degree,
        "gaussians": meta.leaf_count,
        "raht_channels": [CHANNELS[i] for i, f in enumerate(plan.raht) if f],
        "codebook": {"k": k, "retained": r, "dim": d},
        "q": meta.q.tolist(),
    }


def compress(cloud, cameras=None, tau=1.0, bits=16, q=None, retain="none", config=None):
    """Fixed-configuration encode: uniform ``bits`` (or an explicit ``q``) at reserve ratio ``tau``."""
    config = config or CodecConfig()
    scores = importance(cloud, cameras, config.beta)
    prep = prepare(cloud, tau, scores, config, loss_tables=False)
    if q is None:
        q = np.full((C, config.blocks), bits, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64)
    widths = [int(row.max(initial=0)) for row in q]
    plan = prep.plan_for(widths)
    m = prep.leaf_count
    if retain == "all":
        retained = np.arange(m)
    elif retain == "none":
        retained = np.zeros(0, np.int64)
    else:
        from .sh_vq import top_indices
        retained = top_indices(prep.importance, int(retain))
    return encode_prepared(prep, q, plan, retained)
