"""Quaternion/Euler replacement and the region adaptive hierarchical transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gs_model import GaussianCloud

CHANNELS = (
    "opacity_logit",
    "euler_phi",
    "euler_theta",
    "euler_psi",
    "log_scale_0",
    "log_scale_1",
    "log_scale_2",
    "sh_dc_0",
    "sh_dc_1",
    "sh_dc_2",
)
SCALE_CHANNELS = (4, 5, 6)
# |2(wy - xz)| above this is treated as gimbal lock
GIMBAL_EPS = 1e-15


def _unit(q):
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite quaternion")
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    zero = n[..., 0] == 0
    if np.any(zero):
        # a zero quaternion carries no rotation; read it as the identity
        q = q.copy()
        q[zero] = (1.0, 0.0, 0.0, 0.0)
        n = np.where(n == 0, 1.0, n)
    return q / n


def quat_to_euler(q):
    """(w, x, y, z) -> (phi, theta, psi); works on (4,) or (N, 4)."""
    q = _unit(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    s = np.clip(2.0 * (w * y - x * z), -1.0, 1.0)
    phi = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    theta = -np.pi / 2 + 2.0 * np.arctan2(np.sqrt(1.0 + s), np.sqrt(1.0 - s))
    psi = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    lock = np.abs(s) >= 1.0 - GIMBAL_EPS
    if np.any(lock):
        # roll and yaw are coupled: put everything in psi with phi = 0
        r01 = 2.0 * (x * y - w * z)
        r11 = 1.0 - 2.0 * (x * x + z * z)
        phi = np.where(lock, 0.0, phi)
        theta = np.where(lock, np.copysign(np.pi / 2, s), theta)
        psi = np.where(lock, np.arctan2(-r01, r11), psi)
    return np.stack([phi, theta, psi], axis=-1)


def euler_to_rotation(e):
    e = np.asarray(e, dtype=np.float64)
    cf, sf = np.cos(e[..., 0]), np.sin(e[..., 0])
    ct, st = np.cos(e[..., 1]), np.sin(e[..., 1])
    cp, sp = np.cos(e[..., 2]), np.sin(e[..., 2])
    r = np.empty(e.shape[:-1] + (3, 3))
    r[..., 0, 0] = ct * cp
    r[..., 0, 1] = -cf * sp + sf * st * cp
    r[..., 0, 2] = sf * sp + cf * st * cp
    r[..., 1, 0] = ct * sp
    r[..., 1, 1] = cf * cp + sf * st * sp
    r[..., 1, 2] = -sf * cp + cf * st * sp
    r[..., 2, 0] = -st
    r[..., 2, 1] = sf * ct
    r[..., 2, 2] = cf * ct
    return r


def quat_to_rotation(q):
    q = _unit(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_to_quat(r):
    """Unit quaternion with w >= 0 for each rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    tr = np.trace(flat, axis1=1, axis2=2)
    diag = np.stack([flat[:, 0, 0], flat[:, 1, 1], flat[:, 2, 2]], axis=1)
    choice = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    q = np.empty((flat.shape[0], 4))
    for c in range(4):
        m = choice == c
        if not np.any(m):
            continue
        a = flat[m]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.stack([0.25 * s, (a[:, 2, 1] - a[:, 1, 2]) / s, (a[:, 0, 2] - a[:, 2, 0]) / s,
                             (a[:, 1, 0] - a[:, 0, 1]) / s], axis=1)
        elif c == 1:
            s = 2.0 * np.sqrt(_pos(1.0 + a[:, 0, 0] - a[:, 1, 1] - a[:, 2, 2]))
            q[m] = np.stack([(a[:, 2, 1] - a[:, 1, 2]) / s, 0.25 * s, (a[:, 0, 1] + a[:, 1, 0]) / s,
                             (a[:, 0, 2] + a[:, 2, 0]) / s], axis=1)
        elif c == 2:
            s = 2.0 * np.sqrt(_pos(1.0 + a[:, 1, 1] - a[:, 0, 0] - a[:, 2, 2]))
            q[m] = np.stack([(a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 0, 1] + a[:, 1, 0]) / s, 0.25 * s,
                             (a[:, 1, 2] + a[:, 2, 1]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(_pos(1.0 + a[:, 2, 2] - a[:, 0, 0] - a[:, 1, 1]))
            q[m] = np.stack([(a[:, 1, 0] - a[:, 0, 1]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s,
                             (a[:, 1, 2] + a[:, 2, 1]) / s, 0.25 * s], axis=1)
    q[q[:, 0] < 0] *= -1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(r.shape[:-2] + (4,))


def _pos(v):
    return np.maximum(v, 1e-300)


# -- RAHT ---------------------------------------------------------------------


@dataclass(frozen=True)
class _Step:
    n_nodes: int          # nodes entering this step
    left: np.ndarray      # index of the lower-key node of each merged pair
    starts: np.ndarray    # first child index of every parent
    w_left: np.ndarray
    w_right: np.ndarray


class RahtTree:
    """Pairing schedule of the transform; a pure function of the leaf keys.

    One step per Morton bit, least significant first, so every octree level
    contributes an x, then a y, then a z step.
    """

    def __init__(self, keys, depth):
        keys = np.asarray(keys, dtype=np.uint64)
        if keys.size == 0:
            raise ValueError("empty tree")
        self.leaf_count = keys.size
        self.depth = depth
        steps = []
        w = np.ones(keys.size, dtype=np.float64)
        k = keys
        for _ in range(3 * depth):
            parent = k >> np.uint64(1)
            is_start = np.empty(k.size, dtype=bool)
            is_start[0] = True
            is_start[1:] = parent[1:] != parent[:-1]
            starts = np.flatnonzero(is_start)
            left = np.flatnonzero(~is_start) - 1
            steps.append(_Step(k.size, left, starts, w[left], w[left + 1]))
            w_new = w[starts].copy()
            node_of_left = np.searchsorted(starts, left)
            w_new[node_of_left] = w[left] + w[left + 1]
            w = w_new
            k = parent[starts]
        if k.size != 1:
            raise ValueError("keys do not share a single root at the given depth")
        self.steps = steps

    @classmethod
    def from_grid(cls, grid):
        return cls(grid.keys, grid.depth)

    @property
    def ac_count(self):
        return self.leaf_count - 1


def _as_tree(tree):
    if isinstance(tree, RahtTree):
        return tree
    if hasattr(tree, "keys") and hasattr(tree, "depth"):
        return RahtTree(tree.keys, tree.depth)
    # an OctreeStream
    from .geometry import decode_octree
    return RahtTree.from_grid(decode_octree(tree))


def raht_forward(values, tree):
    """Values (M,) or (M, C) in Morton order -> (dc (C,), ac (C, M-1))."""
    tree = _as_tree(tree)
    v = np.asarray(values, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[:, None]
    if v.shape[0] != tree.leaf_count:
        raise ValueError(f"expected {tree.leaf_count} values, got {v.shape[0]}")
    acs = []
    for st in tree.steps:
        if st.left.size:
            a1 = v[st.left]
            a2 = v[st.left + 1]
            s1 = np.sqrt(st.w_left)[:, None]
            s2 = np.sqrt(st.w_right)[:, None]
            norm = np.sqrt(st.w_left + st.w_right)[:, None]
            dc = (s1 * a1 + s2 * a2) / norm
            acs.append((-s2 * a1 + s1 * a2) / norm)
            nxt = v[st.starts].copy()
            nxt[np.searchsorted(st.starts, st.left)] = dc
            v = nxt
    ac = np.concatenate(acs, axis=0).T if acs else np.zeros((v.shape[1], 0))
    dc = v[0]
    if single:
        return dc[0], ac[0]
    return dc, ac


def raht_inverse(dc, ac, tree):
    tree = _as_tree(tree)
    dc = np.atleast_1d(np.asarray(dc, dtype=np.float64))
    ac = np.asarray(ac, dtype=np.float64)
    single = ac.ndim == 1
    if single:
        ac = ac[None, :]
    if ac.shape[1] != tree.ac_count or ac.shape[0] != dc.shape[0]:
        raise ValueError(f"expected {dc.shape[0]}x{tree.ac_count} AC coefficients, got {ac.shape}")
    v = dc[None, :]
    end = tree.ac_count
    for st in reversed(tree.steps):
        if not st.left.size:
            continue
        n = st.left.size
        c = ac[:, end - n: end].T
        end -= n
        d = v[np.searchsorted(st.starts, st.left)]
        s1 = np.sqrt(st.w_left)[:, None]
        s2 = np.sqrt(st.w_right)[:, None]
        norm = np.sqrt(st.w_left + st.w_right)[:, None]
        out = np.empty((st.n_nodes, v.shape[1]))
        out[st.starts] = v
        out[st.left] = (s1 * d - s2 * c) / norm
        out[st.left + 1] = (s2 * d + s1 * c) / norm
        v = out
    return v[:, 0] if single else v


# -- channel assembly -----------------------------------------------------------


@dataclass(frozen=True)
class TransformPlan:
    raht: tuple  # one bool per channel

    def __post_init__(self):
        if len(self.raht) != len(CHANNELS):
            raise ValueError(f"plan needs {len(CHANNELS)} flags")
        object.__setattr__(self, "raht", tuple(bool(f) for f in self.raht))

    @classmethod
    def all_raht(cls):
        return cls((True,) * len(CHANNELS))

    @classmethod
    def for_widths(cls, channel_widths, scale_raw_max=8):
        """RAHT everywhere except scale channels coded at <= 8 bits."""
        flags = [True] * len(CHANNELS)
        for c in SCALE_CHANNELS:
            flags[c] = channel_widths[c] > scale_raw_max
        return cls(tuple(flags))

    def to_mask(self):
        return sum(1 << i for i, f in enumerate(self.raht) if f)

    @classmethod
    def from_mask(cls, mask):
        if mask >> len(CHANNELS):
            raise ValueError(f"unknown channel bits in transform mask {mask:#x}")
        return cls(tuple(bool(mask >> i & 1) for i in range(len(CHANNELS))))


def channel_values(cloud):
    """(M, 10) matrix of the important attributes in canonical channel order."""
    euler = quat_to_euler(cloud.quaternions.astype(np.float64))
    return np.concatenate(
        [
            cloud.opacity_logits.astype(np.float64),
            euler,
            cloud.log_scales.astype(np.float64),
            cloud.sh_dc.astype(np.float64),
        ],
        axis=1,
    )


def assemble_channels(values, plan, tree):
    """(M, 10) channel values -> (10, M) rows of [DC, AC...] or raw values."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1] != len(CHANNELS):
        raise ValueError(f"unknown channel layout with {values.shape[1]} columns")
    out = values.T.copy()
    idx = [c for c, f in enumerate(plan.raht) if f]
    if idx:
        dc, ac = raht_forward(values[:, idx], tree)
        out[idx, 0] = dc
        out[idx, 1:] = ac
    return out


def disassemble_channels(rows, plan, tree):
    rows = np.asarray(rows, dtype=np.float64)
    out = rows.T.copy()
    idx = [c for c, f in enumerate(plan.raht) if f]
    if idx:
        out[:, idx] = raht_inverse(rows[idx, 0], rows[idx, 1:], tree)
    return out


def cloud_from_channels(values, positions, sh_rest, sh_degree):
    rot = euler_to_rotation(values[:, 1:4])
    return GaussianCloud(
        positions=positions,
        quaternions=rotation_to_quat(rot),
        log_scales=values[:, 4:7],
        opacity_logits=values[:, 0:1],
        sh_dc=values[:, 7:10],
        sh_rest=sh_rest,
        sh_degree=sh_degree,
    )
