"""Size-aware configuration search.

For each reserve ratio the scene is prepared once; bit widths then come from a
two-level multiple-choice knapsack (channel widths first, then per-group
widths inside each channel's share of the budget).  The affine estimate
``sum(P * q) + C + S_delta`` is re-calibrated against real packed sizes until
the container lands within tolerance of the target.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import C, CodecConfig, decode, encode_prepared, prepare, sh_codebook
from .quantizer import MAX_BITS
from .splat import importance, render
from .transform import CHANNELS, SCALE_CHANNELS

log = logging.getLogger(__name__)

DEFAULT_TAU_GRID = (0.3, 0.4, 0.5, 0.6, 0.8, 1.0)
FRONTIER_CAP = 4096


class InfeasibleError(ValueError):
    """No choice fits the budget; ``min_size`` is the smallest achievable size."""

    def __init__(self, message, min_size):
        super().__init__(message)
        self.min_size = min_size


# -- multiple-choice knapsack -----------------------------------------------------


def _thin(size, loss, keep):
    """Keep the lowest-loss point of each of ``keep`` equal-width size buckets."""
    lo, hi = size[0], size[-1]
    bucket = np.minimum(((size - lo) / (hi - lo) * keep).astype(np.int64), keep - 1)
    order = np.lexsort((size, loss, bucket))
    first = np.ones(order.size, dtype=bool)
    first[1:] = bucket[order][1:] != bucket[order][:-1]
    sel = np.sort(order[first])
    # bucket minima need not be monotone; restore the frontier property
    run = np.minimum.accumulate(np.concatenate([[np.inf], loss[sel][:-1]]))
    return sel[loss[sel] < run]


def mckp_solve(omega, sizes, budget, cap=FRONTIER_CAP):
    """Pick one option per item minimising total loss with total size <= budget.

    Exact Pareto-frontier dynamic program, run from the last item backwards so
    that ties (equal loss and size) resolve to the lexicographically smallest
    choice vector.  Frontiers larger than ``cap`` points are thinned by size
    bucket, which only happens on instances far larger than the search uses
    per level.
    """
    omega = np.asarray(omega, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if omega.shape != sizes.shape or omega.ndim != 2 or omega.shape[1] == 0:
        raise ValueError("omega and sizes must be matching (G, Q) arrays")
    g_count = omega.shape[0]
    if g_count == 0:
        return np.zeros(0, dtype=np.int64)
    min_sizes = sizes.min(axis=1)
    floor = float(min_sizes.sum())
    if floor > budget:
        raise InfeasibleError(
            f"minimum achievable size {floor:.1f} exceeds budget {budget:.1f}", floor
        )
    # minimum size still needed by items before g
    prefix_min = np.concatenate([[0.0], np.cumsum(min_sizes)])
    f_size = np.zeros(1)
    f_loss = np.zeros(1)
    back = []
    for g in range(g_count - 1, -1, -1):
        cs = (f_size[:, None] + sizes[g][None, :]).ravel()
        cl = (f_loss[:, None] + omega[g][None, :]).ravel()
        opt = np.tile(np.arange(sizes.shape[1]), f_size.size)
        parent = np.repeat(np.arange(f_size.size), sizes.shape[1])
        ok = cs + prefix_min[g] <= budget
        cs, cl, opt, parent = cs[ok], cl[ok], opt[ok], parent[ok]
        order = np.lexsort((parent, opt, cl, cs))
        cs, cl, opt, parent = cs[order], cl[order], opt[order], parent[order]
        run = np.minimum.accumulate(np.concatenate([[np.inf], cl[:-1]]))
        keep = cl < run
        cs, cl, opt, parent = cs[keep], cl[keep], opt[keep], parent[keep]
        if cs.size > cap:
            sel = _thin(cs, cl, cap)
            cs, cl, opt, parent = cs[sel], cl[sel], opt[sel], parent[sel]
        back.append((opt, parent))
        f_size, f_loss = cs, cl
    # frontier is sorted by size with strictly falling loss: the last point wins
    choice = np.empty(g_count, dtype=np.int64)
    p = f_size.size - 1
    for g, (opt, parent) in zip(range(g_count), reversed(back)):
        choice[g] = opt[p]
        p = parent[p]
    return choice


def brute_force_mckp(omega, sizes, budget):
    """Exhaustive oracle with the same tie rule (loss, then size, then lexicographic)."""
    import itertools

    omega = np.asarray(omega, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    best = None
    for combo in itertools.product(range(omega.shape[1]), repeat=omega.shape[0]):
        s = 0.0
        l = 0.0
        # same summation order as the solver (last item first)
        for g in range(omega.shape[0] - 1, -1, -1):
            s += sizes[g, combo[g]]
            l += omega[g, combo[g]]
        if s > budget:
            continue
        key = (l, s, combo)
        if best is None or key < best:
            best = key
    if best is None:
        floor = float(sizes.min(axis=1).sum())
        raise InfeasibleError("no combination fits the budget", floor)
    return np.array(best[2], dtype=np.int64)


def solve_channel_ilp(loss_by_channel, sizes, budget):
    """Channel widths in 1..16 (column q-1 holds width q)."""
    return mckp_solve(loss_by_channel, sizes, budget) + 1


def split_channel_budget(q_c, budget):
    """Integer byte budgets proportional to the channel widths; remainder to the widest."""
    q_c = np.asarray(q_c, dtype=np.int64)
    total = int(math.floor(budget))
    out = (total * q_c) // int(q_c.sum())
    out[int(np.argmax(q_c))] += total - int(out.sum())
    return out


def solve_group_ilp(omega, sizes, budget):
    """Group widths in 0..16 (column b holds width b)."""
    return mckp_solve(omega, sizes, budget)


def total_quality(omega_with_drop, q):
    """Sum of per-group losses; ``omega_with_drop`` is (C, B, 17) indexed by width."""
    q = np.asarray(q, dtype=np.int64)
    i, j = np.indices(q.shape)
    return float(omega_with_drop[i, j, q].sum())


# -- the search -------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    budget_bytes: int
    tau_grid: tuple = DEFAULT_TAU_GRID
    max_rounds: int = 8
    tolerance: float = 0.05
    codec: CodecConfig = field(default_factory=CodecConfig)
    select_by: str = "auto"  # "auto", "omega" or "render"

    def __post_init__(self):
        if not 0 < self.tolerance < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if not self.tau_grid or any(not 0 < t <= 1 for t in self.tau_grid):
            raise ValueError("tau grid values must lie in (0, 1]")
        if self.budget_bytes <= 0:
            raise ValueError("budget must be positive")
        if self.select_by not in ("auto", "omega", "render"):
            raise ValueError(f"unknown selection rule {self.select_by!r}")


class SearchFailed(InfeasibleError):
    pass


@dataclass(eq=False)
class SearchResult:
    container: bytes
    tau: float
    q: np.ndarray
    plan: object
    report: dict


def _variant(prep, channel, width):
    """Whether ``channel`` uses RAHT when coded at ``width`` bits."""
    if not prep.raht_possible:
        return False
    return width > 8 if channel in SCALE_CHANNELS else True


def _size_coeffs(prep, raht):
    """P (C, B) in bytes per bit for a stream variant; zero-padded past each channel's blocks."""
    part = prep.variant_partition(raht)
    p = np.zeros((C, part.max_blocks))
    for i in range(C):
        n = part.lengths(i)
        p[i, : n.size] = n / 8.0
    return p


class _Tables:
    """Loss and size tables for both stream variants of a prepared scene."""

    def __init__(self, prep):
        self.prep = prep
        self.variants = {}
        for raht in (False, True):
            tab = prep.loss_for(raht)
            if tab is None:
                continue
            self.variants[raht] = (tab.with_drop(), _size_coeffs(prep, raht), prep.variant_partition(raht))

    def channel_problem(self):
        loss = np.zeros((C, MAX_BITS))
        size = np.zeros((C, MAX_BITS))
        for i in range(C):
            for b in range(1, MAX_BITS + 1):
                om, p, part = self.variants[_variant(self.prep, i, b)]
                nb = part.block_counts()[i]
                loss[i, b - 1] = om[i, :nb, b].sum()
                size[i, b - 1] = p[i, :nb].sum() * b
        return loss, size

    def for_plan(self, plan):
        bmax = max(self.variants[f][2].block_counts()[i] for i, f in enumerate(plan.raht))
        om = np.zeros((C, bmax, MAX_BITS + 1))
        p = np.zeros((C, bmax))
        nbs = []
        for i, f in enumerate(plan.raht):
            o, pp, part = self.variants[f]
            nb = part.block_counts()[i]
            om[i, :nb] = o[i, :nb]
            p[i, :nb] = pp[i, :nb]
            nbs.append(nb)
        return om, p, nbs

    def estimate(self, plan, q):
        _, p, _ = self.for_plan(plan)
        return float((p * q[:, : p.shape[1]]).sum())

    def omega(self, plan, q):
        om, _, _ = self.for_plan(plan)
        return total_quality(om, q[:, : om.shape[1]])


def solve_hierarchical(tables, budget):
    """(Q, plan) for an attribute payload budget in estimator bytes."""
    prep = tables.prep
    loss, size = tables.channel_problem()
    try:
        q_c = solve_channel_ilp(loss, size, budget)
    except InfeasibleError:
        q_c = np.ones(C, dtype=np.int64)
    plan = prep.plan_for(q_c)
    om, p, nbs = tables.for_plan(plan)
    budgets = split_channel_budget(q_c, max(budget, 0.0))
    q = np.zeros((C, om.shape[1]), dtype=np.int64)
    widths = np.arange(MAX_BITS + 1)
    for i in range(C):
        nb = nbs[i]
        q[i, :nb] = solve_group_ilp(om[i, :nb], p[i, :nb, None] * widths[None, :], budgets[i])
    return q, plan, q_c


def _uniform(prep, width):
    plan = prep.plan_for([width] * C)
    part = prep.partition(plan)
    return np.full((C, part.max_blocks), width, dtype=np.int64), plan


def _fill(prep, essential, budget):
    """Retention set sized to the leftover budget."""
    from .sh_vq import top_indices

    bpv = prep.bytes_per_vector
    if bpv == 0:
        return np.zeros(0, np.int64)
    r = int(np.clip((budget - essential) // bpv, 0, prep.leaf_count))
    return top_indices(prep.importance, r)


def _pack_with_retention(prep, q, plan, budget, essential_buf):
    e = len(essential_buf)
    retained = _fill(prep, e, budget)
    if retained.size == 0:
        return essential_buf, retained
    buf = encode_prepared(prep, q, plan, retained)
    if len(buf) > budget:
        # the mask stream costs a little more than the freed index bits
        r = retained.size - math.ceil((len(buf) - budget) / prep.bytes_per_vector) - 1
        from .sh_vq import top_indices

        retained = top_indices(prep.importance, max(r, 0))
        buf = encode_prepared(prep, q, plan, retained) if retained.size else essential_buf
    return buf, retained


def _search_tau(prep, cfg, diag):
    target = cfg.budget_bytes
    tol = cfg.tolerance
    tables = _Tables(prep)
    q0, plan0 = _uniform(prep, 0)
    const = len(encode_prepared(prep, q0, plan0))
    diag["const_bytes"] = const
    if const > target * (1 + tol):
        diag["skipped"] = "essential components alone exceed the budget"
        diag["closest_size"] = const
        return None
    q16, plan16 = _uniform(prep, 16)
    e16 = len(encode_prepared(prep, q16, plan16))
    capacity = e16 + prep.leaf_count * prep.bytes_per_vector
    diag["capacity_bytes"] = capacity
    if capacity < target * (1 - tol):
        diag["skipped"] = "too few Gaussians survive to fill the budget"
        diag["closest_size"] = capacity
        return None
    q, plan = _uniform(prep, 8)
    e = len(encode_prepared(prep, q, plan))
    s_delta = e - (tables.estimate(plan, q) + const)
    best = None
    history = []
    for rnd in range(1, cfg.max_rounds + 1):
        # keep the implied attribute budget non-negative
        s_delta = min(s_delta, target - const)
        attr_budget = target - const - s_delta
        q, plan, q_c = solve_hierarchical(tables, attr_budget)
        ess = encode_prepared(prep, q, plan)
        buf, retained = _pack_with_retention(prep, q, plan, target, ess)
        s_a = len(buf)
        dev = abs(s_a - target) / target
        history.append({"round": rnd, "S_a": s_a, "S_delta": s_delta, "essential": len(ess), "retained": int(retained.size)})
        if best is None or dev < best[0]:
            best = (dev, buf, q, plan, retained, rnd, s_delta)
        if dev < tol:
            break
        s_delta = len(ess) - (tables.estimate(plan, q) + const)
    dev, buf, q, plan, retained, rnd, s_delta = best
    diag.update(
        iterations=len(history),
        rounds=history,
        S_a=len(buf),
        S_delta=s_delta,
        omega=tables.omega(plan, q),
        retained=int(retained.size),
        deviation=dev,
        feasible=bool(dev < tol),
        closest_size=len(buf),
    )
    if dev >= tol:
        log.warning("tau=%.3f did not converge within %d rounds (deviation %.3f)", prep.tau, cfg.max_rounds, dev)
        return None
    return buf, q, plan


def search(cloud, cameras, cfg):
    """Run the tau loop; returns the best feasible SearchResult or raises SearchFailed."""
    t0 = time.perf_counter()
    codec = cfg.codec
    scores = importance(cloud, cameras, codec.beta)
    centroids = sh_codebook(cloud, codec)
    select = cfg.select_by
    if select == "auto":
        select = "render" if cameras else "omega"
    if select == "render" and not cameras:
        raise ValueError("render-based selection needs cameras")
    ref_images = [render(cloud, cam)[0] for cam in cameras] if select == "render" else None
    per_tau = []
    candidates = []
    for tau in sorted(set(cfg.tau_grid), reverse=True):
        diag = {"tau": tau}
        t = time.perf_counter()
        prep = prepare(cloud, tau, scores, codec, centroids=centroids)
        diag["gaussians"] = prep.leaf_count
        log.info("tau=%.3f prepared %d voxels in %.2f s", tau, prep.leaf_count, time.perf_counter() - t)
        out = _search_tau(prep, cfg, diag)
        diag.setdefault("feasible", False)
        if out is not None:
            buf, q, plan = out
            if select == "render":
                dec = decode(buf)
                mse = [float(np.mean((render(dec, cam)[0] - ref) ** 2)) for cam, ref in zip(cameras, ref_images)]
                diag["render_mse"] = float(np.mean(mse))
            candidates.append((tau, buf, q, plan, diag))
        log.info("tau=%.3f done in %.2f s", tau, time.perf_counter() - t)
        per_tau.append(diag)
    if not candidates:
        closest = min((d.get("closest_size", math.inf) for d in per_tau),
                      key=lambda s: abs(s - cfg.budget_bytes))
        raise SearchFailed(
            f"no reserve ratio reaches {cfg.budget_bytes} bytes within {cfg.tolerance:.0%}; "
            f"closest size {closest}",
            closest,
        )

    def key(c):
        d = c[4]
        return (d["render_mse"] if select == "render" else d["omega"], -c[0])

    best = min(candidates, key=key)
    tau, buf, q, plan, _ = best
    report = {
        "budget_bytes": int(cfg.budget_bytes),
        "tolerance": cfg.tolerance,
        "selected_by": select,
        "tau": tau,
        "size_bytes": len(buf),
        "deviation": abs(len(buf) - cfg.budget_bytes) / cfg.budget_bytes,
        "channels": list(CHANNELS),
        "raht": [bool(f) for f in plan.raht],
        "q": np.asarray(q).tolist(),
        "argmin_omega_tau": min(candidates, key=lambda c: (c[4]["omega"], -c[0]))[0],
        "argmax_omega_tau": max(candidates, key=lambda c: (c[4]["omega"], c[0]))[0],
        "per_tau": per_tau,
    }
    # wall-clock time goes to the log so reports stay byte-identical across runs
    log.info("search finished in %.2f s", time.perf_counter() - t0)
    return SearchResult(container=buf, tau=tau, q=np.asarray(q), plan=plan, report=report)
