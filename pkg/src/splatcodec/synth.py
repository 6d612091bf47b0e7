"""Deterministic synthetic scenes: clustered Gaussians with smooth attribute fields."""
from __future__ import annotations

import numpy as np

from .gs_model import GaussianCloud, rest_dim
from .splat import look_at


def _field(rng, pos, dims, freq):
    """Sum of a few random plane waves per output dimension, roughly unit amplitude."""
    waves = 3
    k = rng.normal(size=(dims, waves, 3)) * freq
    phase = rng.uniform(0, 2 * np.pi, size=(dims, waves))
    out = np.sin(np.einsum("nj,dwj->ndw", pos, k) + phase).sum(axis=2)
    return out / np.sqrt(waves)


def synth_scene(n=100_000, seed=0, degree=3, clusters=48):
    rng = np.random.default_rng(seed)
    k = min(clusters, n)
    centers = rng.normal(size=(k, 3)) * 0.6
    spread = rng.uniform(0.08, 0.2, size=k)
    member = rng.integers(0, k, size=n)
    pos = centers[member] + rng.normal(size=(n, 3)) * spread[member, None]
    if n == 1:
        pos = np.zeros((1, 3))
    q = _field(rng, pos, 4, 1.5) + np.array([2.0, 0, 0, 0]) + 0.05 * rng.normal(size=(n, 4))
    log_scales = -3.6 + 0.35 * _field(rng, pos, 3, 2.0) + 0.05 * rng.normal(size=(n, 3))
    opacity = 0.8 + 1.2 * _field(rng, pos, 1, 1.0) + 0.1 * rng.normal(size=(n, 1))
    dc = 0.9 * _field(rng, pos, 3, 1.2) + 0.05 * rng.normal(size=(n, 3))
    d = rest_dim(degree)
    if d:
        # higher bands carry less energy
        band = np.concatenate([np.full(3 * (2 * l + 1), 0.3 / l) for l in range(1, degree + 1)])
        rest = _field(rng, pos, d, 1.0) * band + 0.02 * rng.normal(size=(n, d))
    else:
        rest = np.zeros((n, 0))
    return GaussianCloud(
        positions=pos,
        quaternions=q,
        log_scales=log_scales,
        opacity_logits=opacity,
        sh_dc=dc,
        sh_rest=rest,
        sh_degree=degree,
    )


def ring_cameras(cloud, count=8, width=160, height=120, radius=3.5, focal=150.0):
    """Cameras on a slightly raised ring, all looking at the cloud centroid."""
    c = cloud.positions.astype(np.float64).mean(axis=0)
    cams = []
    for i in range(count):
        a = 2 * np.pi * i / count
        eye = c + radius * np.array([np.cos(a), 0.35, np.sin(a)])
        cams.append(look_at(eye, c, [0.0, -1.0, 0.0], focal, width, height))
    return cams
