"""Static-model range coding of integer symbol streams.

The coder is a 32-bit renormalising range coder with carry propagation (the
LZMA ``rc`` scheme).  Every table totals ``2**16`` so a symbol is coded with
``range >> 16`` precision; the range never drops below ``2**24``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24


class EntropyError(ValueError):
    """Corrupt or inconsistent coded stream."""


@dataclass(frozen=True, eq=False)
class FrequencyTable:
    widths: np.ndarray  # (S,) int64, each >= 1, sum == TOTAL

    def __post_init__(self):
        w = np.asarray(self.widths, dtype=np.int64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("a table needs at least one symbol")
        if w.min() < 1 or int(w.sum()) != TOTAL:
            raise ValueError("widths must be >= 1 and sum to 2**16")
        w.setflags(write=False)
        object.__setattr__(self, "widths", w)

    @property
    def symbol_count(self):
        return self.widths.size

    @property
    def cum_freq(self):
        cum = np.zeros(self.widths.size + 1, dtype=np.int64)
        np.cumsum(self.widths, out=cum[1:])
        return cum

    def bits(self, symbols):
        """Ideal code length of ``symbols`` under this table, in bits."""
        symbols = np.asarray(symbols, dtype=np.int64)
        return float(np.sum(PRECISION - np.log2(self.widths[symbols].astype(np.float64))))

    def to_bytes(self):
        return (self.widths - 1).astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, buf, symbol_count):
        w = np.frombuffer(buf, dtype="<u2", count=symbol_count).astype(np.int64) + 1
        return cls(w)


def build_table(symbols, symbol_count):
    """Laplace-floored counts apportioned to 2**16 by largest remainder.

    Every symbol in ``[0, symbol_count)`` gets a width of at least one; the
    remaining ``2**16 - symbol_count`` units follow the observed counts.
    Remainder ties go to the lower symbol.
    """
    if not 1 <= symbol_count <= TOTAL:
        raise ValueError(f"symbol_count must be in [1, {TOTAL}], got {symbol_count}")
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size and (symbols.min() < 0 or symbols.max() >= symbol_count):
        bad = int(symbols[(symbols < 0) | (symbols >= symbol_count)][0])
        raise ValueError(f"symbol {bad} outside alphabet of size {symbol_count}")
    counts = np.bincount(symbols, minlength=symbol_count).astype(np.int64)
    spare = TOTAL - symbol_count
    total = int(counts.sum())
    widths = np.ones(symbol_count, dtype=np.int64)
    if total == 0:
        # nothing observed: spread evenly
        counts = np.ones(symbol_count, dtype=np.int64)
        total = symbol_count
    quota = counts * spare
    base = quota // total
    rem = quota % total
    leftover = spare - int(base.sum())
    widths += base
    if leftover:
        order = np.lexsort((np.arange(symbol_count), -rem))
        widths[order[:leftover]] += 1
    return FrequencyTable(widths)


def stack_tables(tables):
    """Cumulative tables as one (T, S+1) array; alphabets padded with width 0."""
    s = max(t.symbol_count for t in tables)
    cum = np.full((len(tables), s + 1), TOTAL, dtype=np.int64)
    for i, t in enumerate(tables):
        cum[i, : t.symbol_count + 1] = t.cum_freq
    return cum


@njit(cache=True)
def _encode(symbols, contexts, cum, out):
    low = 0
    rng = 0xFFFFFFFF
    cache = 0
    cache_size = 1
    pos = 0
    n = symbols.size
    for i in range(n + 5):
        if i < n:
            c = cum[contexts[i]]
            s = symbols[i]
            r = rng >> PRECISION
            low += r * c[s]
            rng = r * (c[s + 1] - c[s])
            shifts = 0
            while rng < _TOP:
                rng <<= 8
                shifts += 1
        else:
            shifts = 1  # flush: five shift_low calls
        for _ in range(shifts):
            if low < 0xFF000000 or low >= 0x100000000:
                carry = low >> 32
                temp = cache
                while True:
                    out[pos] = (temp + carry) & 0xFF
                    pos += 1
                    temp = 0xFF
                    cache_size -= 1
                    if cache_size == 0:
                        break
                cache = (low >> 24) & 0xFF
            cache_size += 1
            low = (low & 0x00FFFFFF) << 8
    return pos


@njit(cache=True)
def _decode(data, state, contexts, cum, out):
    # state = [code, range, pos, error]
    code = state[0]
    rng = state[1]
    pos = state[2]
    err = state[3]
    n = out.size
    size = data.size
    for i in range(n):
        c = cum[contexts[i]]
        r = rng >> PRECISION
        v = code // r
        if v >= TOTAL:
            err = 1
            v = TOTAL - 1
        lo = 0
        hi = c.size - 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if c[mid] <= v:
                lo = mid
            else:
                hi = mid
        if c[lo + 1] == c[lo]:
            err = 1
        out[i] = lo
        code -= r * c[lo]
        rng = r * (c[lo + 1] - c[lo])
        if rng == 0:
            err = 1
            rng = 1
        while rng < _TOP:
            b = 0
            if pos < size:
                b = data[pos]
            else:
                err = 2
            pos += 1
            code = ((code << 8) | b) & 0xFFFFFFFF
            rng <<= 8
    state[0] = code
    state[1] = rng
    state[2] = pos
    state[3] = err


def _as_symbols(symbols):
    return np.ascontiguousarray(symbols, dtype=np.int64).ravel()


def encode_with_contexts(symbols, contexts, tables):
    """Code ``symbols[i]`` with ``tables[contexts[i]]``."""
    symbols = _as_symbols(symbols)
    if symbols.size == 0:
        return b""
    contexts = _as_symbols(contexts)
    if contexts.size != symbols.size:
        raise ValueError("one context per symbol required")
    cum = stack_tables(tables)
    widths = cum[contexts, symbols + 1] - cum[contexts, np.minimum(symbols, cum.shape[1] - 1)]
    if symbols.min() < 0 or np.any(symbols >= cum.shape[1] - 1) or widths.min() <= 0:
        raise ValueError("stream contains a symbol the table cannot code")
    out = np.empty(2 * symbols.size + 16, dtype=np.uint8)
    n = _encode(symbols, contexts, cum, out)
    # the first byte of an LZMA-style range coder is always zero
    return out[1:n].tobytes()


def encode(symbols, table):
    symbols = _as_symbols(symbols)
    return encode_with_contexts(symbols, np.zeros(symbols.size, dtype=np.int64), [table])


class RangeDecoder:
    """Incremental decoder; contexts may depend on already-decoded symbols."""

    def __init__(self, data):
        self.data = np.frombuffer(bytes(data), dtype=np.uint8)
        head = np.zeros(4, dtype=np.int64)
        k = min(4, self.data.size)
        head[:k] = self.data[:k]
        code = 0
        for b in head:
            code = (code << 8) | int(b)
        self.state = np.array([code, 0xFFFFFFFF, 4, 0 if self.data.size >= 4 else 2], dtype=np.int64)

    def decode(self, count, contexts, tables):
        out = np.empty(count, dtype=np.int64)
        if count == 0:
            return out
        contexts = _as_symbols(contexts)
        if contexts.size != count:
            raise ValueError("one context per symbol required")
        _decode(self.data, self.state, contexts, stack_tables(tables), out)
        if self.state[3]:
            raise EntropyError("corrupt range-coded stream")
        return out

    def finish(self):
        code, rng, pos, err = (int(v) for v in self.state)
        if err or pos != self.data.size or code >= rng:
            raise EntropyError(
                f"range decoder final-state check failed (consumed {pos} of {self.data.size} bytes)"
            )


def decode(data, table, count):
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        if len(data):
            raise EntropyError("payload present for an empty stream")
        return np.empty(0, dtype=np.int64)
    if not len(data):
        raise EntropyError("empty payload for a non-empty stream")
    dec = RangeDecoder(data)
    out = dec.decode(count, np.zeros(count, dtype=np.int64), [table])
    dec.finish()
    return out


def empirical_entropy(symbols):
    """Shannon entropy of the empirical distribution, bits per symbol."""
    symbols = _as_symbols(symbols)
    if symbols.size == 0:
        raise ValueError("entropy of an empty stream is undefined")
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def entropy_lower_bound(symbols, reserve_count):
    """Shannon bound in bits for ``reserve_count`` symbols of this distribution."""
    return reserve_count * empirical_entropy(symbols)
