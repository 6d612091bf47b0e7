"""Group-wise uniform quantization and the per-group loss table.

A channel's coefficient stream is cut into ``B`` near-equal contiguous blocks.
Each block is quantized with its own stored ``(min, max)`` and bit width::

    S = (max - min) / 2**b
    Z = round(2**b - max / S)
    code = round(clamp(c / S + Z, 0, 2**b - 1))
    c_hat = (code - Z) * S

Rounding is half-to-even.  ``b == 0`` drops the payload and restores the
block midpoint.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

MAX_BITS = 16
NORMS = ("l1", "l2", "linf")


@dataclass(frozen=True)
class GroupPartition:
    boundaries: tuple  # per channel, an int64 array of B_i + 1 offsets

    @classmethod
    def uniform(cls, lengths, blocks):
        if blocks < 1:
            raise ValueError("blocks must be >= 1")
        out = []
        for n in lengths:
            if n < 1:
                raise ValueError("cannot partition an empty stream")
            b = min(blocks, n)
            out.append(np.arange(b + 1, dtype=np.int64) * n // b)
        return cls(tuple(out))

    @property
    def channel_count(self):
        return len(self.boundaries)

    def block_counts(self):
        return [len(b) - 1 for b in self.boundaries]

    @property
    def max_blocks(self):
        return max(self.block_counts())

    def lengths(self, channel):
        return np.diff(self.boundaries[channel])

    def group(self, stream, channel, block):
        lo, hi = self.boundaries[channel][block], self.boundaries[channel][block + 1]
        return stream[lo:hi]


@dataclass(frozen=True, eq=False)
class QuantizedGroup:
    codes: np.ndarray  # uint32; empty when bits == 0
    bits: int
    vmin: np.float32
    vmax: np.float32
    length: int

    def __post_init__(self):
        if not 0 <= self.bits <= MAX_BITS:
            raise ValueError(f"bit width {self.bits} outside [0, {MAX_BITS}]")
        if self.vmin > self.vmax:
            raise ValueError("min > max")


def scale_zero(vmin, vmax, bits):
    """(S, Z) as float64 from the stored f32 range; (1, 0) when degenerate."""
    lo, hi = float(np.float32(vmin)), float(np.float32(vmax))
    if hi == lo:
        return 1.0, 0.0
    s = (hi - lo) / (1 << bits)
    z = float(np.rint((1 << bits) - hi / s))
    return s, z


def _codes(c, lo, hi, bits):
    if hi == lo:
        return np.zeros(c.shape, dtype=np.uint32)
    s, z = scale_zero(lo, hi, bits)
    level = np.clip(c / s + z, 0.0, float((1 << bits) - 1))
    return np.rint(level).astype(np.uint32)


def quantize_group(c, bits):
    c = np.asarray(c, dtype=np.float64).ravel()
    if c.size == 0:
        raise ValueError("empty group")
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite value in group")
    if not 0 <= bits <= MAX_BITS:
        raise ValueError(f"bit width {bits} outside [0, {MAX_BITS}]")
    lo, hi = np.float32(c.min()), np.float32(c.max())
    # f32 rounding can move the stored range inward; widen to cover c
    if float(lo) > c.min():
        lo = np.nextafter(lo, np.float32(-np.inf))
    if float(hi) < c.max():
        hi = np.nextafter(hi, np.float32(np.inf))
    codes = np.empty(0, dtype=np.uint32) if bits == 0 else _codes(c, float(lo), float(hi), bits)
    return QuantizedGroup(codes, bits, lo, hi, c.size)


def dequantize_group(g):
    lo, hi = float(g.vmin), float(g.vmax)
    if g.bits == 0:
        return np.full(g.length, 0.5 * (lo + hi))
    if hi == lo:
        return np.full(g.length, lo)
    s, z = scale_zero(lo, hi, g.bits)
    return (g.codes.astype(np.float64) - z) * s


def _check_q(q, partition):
    q = np.asarray(q, dtype=np.int64)
    if q.ndim != 2 or q.shape[0] != partition.channel_count or q.shape[1] < partition.max_blocks:
        raise ValueError(
            f"Q must be {partition.channel_count}x{partition.max_blocks}, got {q.shape}"
        )
    if q.min(initial=0) < 0 or q.max(initial=0) > MAX_BITS:
        raise ValueError("Q entries must lie in [0, 16]")
    return q


def _map(fn, items, threads):
    threads = threads or os.cpu_count() or 1
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def quantize_all(streams, partition, q, threads=None):
    """Groups as a list (per channel) of lists (per block); order-independent of scheduling."""
    q = _check_q(q, partition)
    jobs = [(i, j) for i in range(partition.channel_count) for j in range(partition.block_counts()[i])]

    def run(ij):
        i, j = ij
        try:
            return quantize_group(partition.group(streams[i], i, j), int(q[i, j]))
        except ValueError as exc:
            raise ValueError(f"group ({i}, {j}): {exc}") from exc

    flat = _map(run, jobs, threads)
    out = [[] for _ in range(partition.channel_count)]
    for (i, _), g in zip(jobs, flat):
        out[i].append(g)
    return out


def dequantize_all(groups):
    return [np.concatenate([dequantize_group(g) for g in ch]) for ch in groups]


def residual_norm(r, norm):
    r = np.abs(r)
    if norm == "l1":
        return float(r.sum())
    if norm == "l2":
        return float(np.sqrt(np.dot(r, r)))
    if norm == "linf":
        return float(r.max(initial=0.0))
    raise ValueError(f"unknown norm {norm!r}")


@dataclass(frozen=True, eq=False)
class LossTable:
    omega: np.ndarray       # (C, B, 16): b = 1..16
    drop_loss: np.ndarray   # (C, B): b = 0
    norm: str

    def loss(self, i, j, b):
        return float(self.drop_loss[i, j] if b == 0 else self.omega[i, j, b - 1])

    def with_drop(self):
        """(C, B, 17) array indexed by bit width 0..16."""
        return np.concatenate([self.drop_loss[:, :, None], self.omega], axis=2)


def group_losses(c, norm):
    """Loss of one group at b = 0..16 (17 values)."""
    c = np.asarray(c, dtype=np.float64).ravel()
    out = np.empty(MAX_BITS + 1)
    for b in range(MAX_BITS + 1):
        g = quantize_group(c, b)
        out[b] = residual_norm(dequantize_group(g) - c, norm)
    return out


def build_loss_table(streams, partition, norm="l2", threads=None):
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    C, B = partition.channel_count, partition.max_blocks
    table = np.zeros((C, B, MAX_BITS + 1))
    jobs = [(i, j) for i in range(C) for j in range(partition.block_counts()[i])]

    def run(ij):
        i, j = ij
        return group_losses(partition.group(streams[i], i, j), norm)

    for (i, j), row in zip(jobs, _map(run, jobs, threads)):
        table[i, j] = row
    return LossTable(omega=table[:, :, 1:].copy(), drop_loss=table[:, :, 0].copy(), norm=norm)
