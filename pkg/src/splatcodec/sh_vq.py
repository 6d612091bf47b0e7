"""Vector quantization of the higher-degree SH coefficients.

Rows are clustered with mini-batch k-means; whatever budget is left after the
essential components is spent on keeping the original rows of the most
important Gaussians, appended to the codebook after the ``k`` centroids.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from numba import njit

DEFAULT_K = 4096
DEFAULT_ITERS = 10
DEFAULT_BATCH = 1 << 16
_CHUNK = 8192
# below this many point-centroid pairs per pass distances are computed in f64
_EXACT_PAIRS = 1 << 22


@dataclass(frozen=True, eq=False)
class ShCodebook:
    entries: np.ndarray      # (k + r, D) float32
    assignments: np.ndarray  # (M,) int64
    k: int
    r: int

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=np.float32)
        a = np.ascontiguousarray(self.assignments, dtype=np.int64)
        if e.ndim != 2 or e.shape[0] != self.k + self.r:
            raise ValueError(f"codebook must have k + r = {self.k + self.r} rows, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("non-finite codebook entry")
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "assignments", a)

    @property
    def dim(self):
        return self.entries.shape[1]

    def retained_mask(self):
        return self.assignments >= self.k


@njit(cache=True)
def _argmin_rows(g, cn, xn, idx, dist):
    # nearest of |c|^2 - 2 x.c per row (g holds 2 x.c); strict < keeps the lower index
    for i in range(g.shape[0]):
        row = g[i]
        best = cn[0] - row[0]
        bj = 0
        for j in range(1, row.shape[0]):
            v = cn[j] - row[j]
            if v < best:
                best = v
                bj = j
        idx[i] = bj
        dist[i] = max(xn[i] + best, 0.0)


def _nearest(x, c):
    """Index of and squared distance to the nearest centroid; ties to the lower index."""
    m = x.shape[0]
    idx = np.empty(m, dtype=np.int64)
    dist = np.empty(m, dtype=np.float64)
    exact = m * c.shape[0] <= _EXACT_PAIRS
    dtype = np.float64 if exact else np.float32
    cc = c.astype(dtype)
    cn = np.einsum("ij,ij->i", cc, cc)
    twice = (2 * cc).T.copy()
    for lo in range(0, m, _CHUNK):
        xs = x[lo: lo + _CHUNK].astype(dtype)
        xn = np.einsum("ij,ij->i", xs, xs).astype(np.float64)
        _argmin_rows(xs @ twice, cn, xn, idx[lo: lo + _CHUNK], dist[lo: lo + _CHUNK])
    return idx, dist


@njit(cache=True)
def _kmeanspp(x, k, uniforms):
    n = x.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    chosen[0] = min(int(uniforms[0] * n), n - 1)
    taken[chosen[0]] = True
    d2 = np.empty(n)
    for i in range(n):
        s = 0.0
        for t in range(x.shape[1]):
            v = x[i, t] - x[chosen[0], t]
            s += v * v
        d2[i] = s
    for c in range(1, k):
        total = 0.0
        for i in range(n):
            if not taken[i]:
                total += d2[i]
        pick = -1
        if total > 0.0:
            target = uniforms[c] * total
            acc = 0.0
            for i in range(n):
                if taken[i] or d2[i] <= 0.0:
                    continue
                acc += d2[i]
                pick = i
                if acc > target:
                    break
        if pick < 0:
            for i in range(n):
                if not taken[i]:
                    pick = i
                    break
        chosen[c] = pick
        taken[pick] = True
        for i in range(n):
            s = 0.0
            for t in range(x.shape[1]):
                v = x[i, t] - x[pick, t]
                s += v * v
            if s < d2[i]:
                d2[i] = s
    return chosen


@njit(cache=True)
def _minibatch_update(x, assign, centroids, counts):
    for p in range(x.shape[0]):
        c = assign[p]
        counts[c] += 1
        eta = 1.0 / counts[c]
        for t in range(x.shape[1]):
            centroids[c, t] += eta * (x[p, t] - centroids[c, t])


@njit(cache=True)
def _lloyd_update(x, assign, k):
    sums = np.zeros((k, x.shape[1]))
    n = np.zeros(k, dtype=np.int64)
    for p in range(x.shape[0]):
        c = assign[p]
        n[c] += 1
        for t in range(x.shape[1]):
            sums[c, t] += x[p, t]
    return sums, n


def _reseed_empty(centroids, empty, x, dist):
    """Move each empty centroid onto the farthest remaining point."""
    dist = dist.copy()
    for c in empty:
        p = int(np.argmax(dist))
        centroids[c] = x[p]
        dist[p] = -1.0


def kmeans_batched(vectors, k, iters=DEFAULT_ITERS, batch=DEFAULT_BATCH, seed=0):
    """Mini-batch k-means; a plain Lloyd iteration whenever ``batch >= M``."""
    x = np.ascontiguousarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError("k-means needs a non-empty (M, D) array with D >= 1")
    m = x.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    rng = np.random.default_rng(seed)
    sub_n = min(m, 4 * k)
    sub = np.sort(rng.choice(m, sub_n, replace=False)) if sub_n < m else np.arange(m)
    seeds = _kmeanspp(x[sub], k, rng.random(k))
    centroids = x[sub[seeds]].copy()
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(iters):
        if batch >= m:
            assign, dist = _nearest(x, centroids)
            sums, n = _lloyd_update(x, assign, k)
            nz = n > 0
            centroids[nz] = sums[nz] / n[nz, None]
            if not nz.all():
                _reseed_empty(centroids, np.flatnonzero(~nz), x, dist)
        else:
            idx = np.sort(rng.choice(m, batch, replace=False))
            xb = x[idx]
            assign, dist = _nearest(xb, centroids)
            _minibatch_update(xb, assign, centroids, counts)
            empty = np.flatnonzero(counts == 0)
            if empty.size:
                _reseed_empty(centroids, empty, xb, dist)
    assign, _ = _nearest(x, centroids)
    return centroids, assign


def total_sse(vectors, centroids, assign):
    r = np.asarray(vectors, dtype=np.float64) - centroids[assign]
    return float(np.einsum("ij,ij->", r, r))


_CACHE = {}
_CACHE_LIMIT = 16


def cached_kmeans(vectors, k, iters=DEFAULT_ITERS, batch=DEFAULT_BATCH, seed=0):
    """kmeans_batched memoised on the array content and parameters."""
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    h = hashlib.sha256(x.tobytes()).hexdigest()
    key = (h, x.shape, k, iters, batch, seed)
    if key not in _CACHE:
        if len(_CACHE) >= _CACHE_LIMIT:
            _CACHE.pop(next(iter(_CACHE)))
        _CACHE[key] = kmeans_batched(x, k, iters, batch, seed)
    c, a = _CACHE[key]
    return c.copy(), a.copy()


def top_indices(scores, r):
    """Indices of the ``r`` largest scores, ties to the lower index, ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    r = int(min(max(r, 0), scores.size))
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:r])


def plan_retention(importance, essential_bytes, budget_bytes, bytes_per_vector):
    if budget_bytes < 0:
        raise ValueError("budget must be non-negative")
    if bytes_per_vector <= 0:
        return np.empty(0, dtype=np.int64)
    m = len(importance)
    r = int(np.clip((budget_bytes - essential_bytes) // bytes_per_vector, 0, m))
    return top_indices(importance, r)


def encode_sh(sh_rest, centroids, assign, retained):
    """Codebook of ``centroids`` followed by the retained original rows."""
    sh_rest = np.asarray(sh_rest, dtype=np.float32)
    retained = np.asarray(retained, dtype=np.int64)
    k = centroids.shape[0]
    a = np.asarray(assign, dtype=np.int64).copy()
    a[retained] = k + np.arange(retained.size)
    entries = np.concatenate([np.asarray(centroids, dtype=np.float32), sh_rest[retained]], axis=0)
    return ShCodebook(entries=entries, assignments=a, k=k, r=int(retained.size))


def decode_sh(book):
    a = book.assignments
    if a.size and (a.min() < 0 or a.max() >= book.k + book.r):
        raise ValueError("SH assignment out of codebook range")
    return book.entries[a]


def raw_size(book, m):
    """Pre-entropy byte count: entries plus fixed-width indices."""
    n = book.k + book.r
    bits = int(np.ceil(np.log2(n))) if n > 1 else 0
    return n * book.dim * 4 + (m * bits + 7) // 8
