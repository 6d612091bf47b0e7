"""Forward EWA splatting, importance scores and pruning.

The renderer is a desk-scale reference: every splat is composited front to
back in one global depth order, only the degree-0 colour is used and the
background is white.  Besides the image it returns each Gaussian's summed
``T * alpha`` over all pixels, which is the view-dependent importance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .gs_model import GaussianCloud
from .transform import quat_to_rotation

DILATION = 0.3
CUTOFF_SIGMA = 3.0
ALPHA_MIN = 1.0 / 255.0
DEFAULT_BETA = 0.1
_BANDS = 8


@dataclass(frozen=True, eq=False)
class Camera:
    world_to_camera: np.ndarray  # (4, 4)
    focal: tuple
    principal_point: tuple
    width: int
    height: int
    near_clip: float = 0.01

    def __post_init__(self):
        w = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        r = w[:3, :3]
        if not np.all(np.isfinite(w)) or np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world_to_camera rotation block is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not self.near_clip > 0:
            raise ValueError("near_clip must be positive")
        object.__setattr__(self, "world_to_camera", w)
        object.__setattr__(self, "focal", tuple(float(f) for f in self.focal))
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    def to_dict(self):
        return {
            "world_to_camera": [float(v) for v in self.world_to_camera.ravel()],
            "fx": self.focal[0],
            "fy": self.focal[1],
            "cx": self.principal_point[0],
            "cy": self.principal_point[1],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
                focal=(d["fx"], d["fy"]),
                principal_point=(d["cx"], d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
                near_clip=float(d.get("near_clip", 0.01)),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed camera entry: {exc}") from exc


def look_at(eye, target, up, focal, width, height):
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    w = np.eye(4)
    w[:3, :3] = np.stack([x, y, z])
    w[:3, 3] = -w[:3, :3] @ eye
    return Camera(w, (focal, focal), (width / 2.0, height / 2.0), width, height)


def load_cameras(path):
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise ValueError("camera file must hold a JSON array")
    return [Camera.from_dict(d) for d in doc]


def save_cameras(path, cameras):
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=1)


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float


def _project_arrays(positions, rotations, scales, cam):
    """Camera-space depth, pixel means and undilated 2D covariances for all Gaussians."""
    w = cam.world_to_camera
    wr = w[:3, :3]
    pc = positions @ wr.T + w[:3, 3]
    z = pc[:, 2]
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    safe = np.where(z > cam.near_clip, z, 1.0)
    mean = np.stack([fx * pc[:, 0] / safe + cx, fy * pc[:, 1] / safe + cy], axis=1)
    m = rotations * scales[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    j = np.zeros((len(z), 2, 3))
    j[:, 0, 0] = fx / safe
    j[:, 0, 2] = -fx * pc[:, 0] / safe**2
    j[:, 1, 1] = fy / safe
    j[:, 1, 2] = -fy * pc[:, 1] / safe**2
    t = j @ wr
    cov = t @ sigma @ np.swapaxes(t, 1, 2)
    return z, mean, cov


def project(g, cam):
    """Splat2D for one activated Gaussian, or None when it lies at or behind the near plane."""
    z, mean, cov = _project_arrays(
        g.position[None, :], quat_to_rotation(g.rotation)[None], g.scale[None, :], cam
    )
    if z[0] <= cam.near_clip:
        return None
    return Splat2D(mean[0], 0.5 * (cov[0] + cov[0].T), float(z[0]), float(g.opacity))


@njit(cache=True, parallel=True)
def _composite(order, mean, conic, opacity, color, bbox, width, height, bands, accum, image):
    rows_per = (height + bands - 1) // bands
    for band in prange(bands):
        r0 = band * rows_per
        r1 = min(height, r0 + rows_per)
        if r0 >= r1:
            continue
        nrow = r1 - r0
        trans = np.ones((nrow, width))
        rgb = np.zeros((nrow, width, 3))
        for k in range(order.size):
            g = order[k]
            ya = max(bbox[g, 2], r0)
            yb = min(bbox[g, 3], r1 - 1)
            if ya > yb:
                continue
            a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
            acc = 0.0
            for r in range(ya, yb + 1):
                dy = r + 0.5 - mean[g, 1]
                for col in range(bbox[g, 0], bbox[g, 1] + 1):
                    dx = col + 0.5 - mean[g, 0]
                    md = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    if md > 9.0:
                        continue
                    alpha = opacity[g] * math.exp(-0.5 * md)
                    if alpha < 1.0 / 255.0:
                        continue
                    t = trans[r - r0, col]
                    wgt = t * alpha
                    acc += wgt
                    rgb[r - r0, col, 0] += wgt * color[g, 0]
                    rgb[r - r0, col, 1] += wgt * color[g, 1]
                    rgb[r - r0, col, 2] += wgt * color[g, 2]
                    trans[r - r0, col] = t * (1.0 - alpha)
            accum[band, g] += acc
        for r in range(nrow):
            for col in range(width):
                for ch in range(3):
                    image[r0 + r, col, ch] = rgb[r, col, ch] + trans[r, col]


def render(cloud, cam):
    """(image (H, W, 3), accum (N,)) for one camera; ``cloud`` may be None for an empty scene."""
    h, w = cam.height, cam.width
    n = 0 if cloud is None else len(cloud)
    image = np.ones((h, w, 3))
    if n == 0:
        return image, np.zeros(0)
    z, mean, cov = _project_arrays(
        cloud.positions.astype(np.float64),
        quat_to_rotation(cloud.unit_quaternions()),
        cloud.scales(),
        cam,
    )
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    a = cov[:, 0, 0] + DILATION
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + DILATION
    det = a * c - b * b
    visible = z > cam.near_clip
    assert np.all(det[visible] > 0), "singular 2D covariance after dilation"
    det = np.where(det > 0, det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    rad = CUTOFF_SIGMA * np.sqrt(lam)
    with np.errstate(invalid="ignore"):
        lo_x = np.ceil(mean[:, 0] - rad - 0.5)
        hi_x = np.floor(mean[:, 0] + rad - 0.5)
        lo_y = np.ceil(mean[:, 1] - rad - 0.5)
        hi_y = np.floor(mean[:, 1] + rad - 0.5)
    bbox = np.stack([
        np.clip(lo_x, 0, w), np.clip(hi_x, -1, w - 1), np.clip(lo_y, 0, h), np.clip(hi_y, -1, h - 1)
    ], axis=1)
    bbox = np.where(np.isfinite(bbox), bbox, -1).astype(np.int64)
    live = visible & (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])
    idx = np.flatnonzero(live)
    order = idx[np.lexsort((idx, z[idx]))]
    accum = np.zeros((_BANDS, n))
    _composite(
        order, mean, conic, cloud.opacities(), cloud.base_colors(), bbox, w, h, _BANDS, accum, image
    )
    return image, accum.sum(axis=0)


# -- importance ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ImportanceScores:
    i_d: np.ndarray
    i_i: np.ndarray
    i_g: np.ndarray

    @classmethod
    def combine(cls, i_d, i_i):
        i_d = np.asarray(i_d, dtype=np.float64)
        i_i = np.asarray(i_i, dtype=np.float64)
        return cls(i_d, i_i, i_d * i_i)


def view_dependent_importance(cloud, cameras):
    if not cameras:
        raise ValueError("view-dependent importance needs at least one camera")
    total = np.zeros(len(cloud))
    for cam in cameras:
        total += render(cloud, cam)[1]
    return total


def quantile_normalizer(values):
    """Nearest-rank 90th percentile: the ceil(0.9 N)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(9 * v.size + 9) // 10 - 1])


def view_independent_importance(cloud, beta=DEFAULT_BETA):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    vol = np.prod(cloud.scales(), axis=1)
    norm = quantile_normalizer(vol)
    ratio = vol / norm if norm > 0 else np.ones_like(vol)
    return np.clip(ratio, 0.0, 1.0) ** beta


def importance(cloud, cameras=None, beta=DEFAULT_BETA):
    """Joint score; without cameras the view-dependent part is all ones."""
    i_d = view_dependent_importance(cloud, cameras) if cameras else np.ones(len(cloud))
    return ImportanceScores.combine(i_d, view_independent_importance(cloud, beta))


def keep_count(n, tau):
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    # guard against tau * n landing a hair above an integer
    return min(n, max(0, math.ceil(round(tau * n, 9))))


def prune(cloud, scores, tau):
    g = scores.i_g if isinstance(scores, ImportanceScores) else np.asarray(scores, dtype=np.float64)
    n = len(cloud)
    if g.shape != (n,):
        raise ValueError(f"expected {n} scores, got {g.shape}")
    k = keep_count(n, tau)
    if k == 0:
        raise ValueError("tau removes every Gaussian")
    order = np.lexsort((np.arange(n), -g))
    kept = np.sort(order[:k])
    return (cloud if k == n else cloud.subset(kept)), kept


def importance_cdf(scores):
    """(x%, y%) pairs: the x% least important Gaussians hold y% of the total."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0 or s[0] < 0:
        raise ValueError("scores must be non-empty and non-negative")
    total = s.sum()
    if total <= 0:
        raise ValueError("all-zero scores have no cumulative distribution")
    y = np.concatenate([[0.0], np.cumsum(s)]) / total * 100.0
    x = np.arange(s.size + 1) / s.size * 100.0
    y[-1] = 100.0
    return list(zip(x.tolist(), y.tolist()))


def psnr(a, b):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def mean_render_mse(reference, cloud, cameras):
    return float(np.mean([np.mean((render(reference, c)[0] - render(cloud, c)[0]) ** 2) for c in cameras]))


__all__ = [
    "Camera", "Splat2D", "ImportanceScores", "GaussianCloud", "project", "render", "look_at",
    "load_cameras", "save_cameras", "view_dependent_importance", "view_independent_importance",
    "importance", "prune", "importance_cdf", "psnr", "keep_count", "quantile_normalizer",
]
