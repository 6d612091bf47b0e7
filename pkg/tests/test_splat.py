import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_cloud
from splatcodec.gs_model import SH_C0, GaussianCloud, activate
from splatcodec.splat import (
    ALPHA_MIN,
    DILATION,
    Camera,
    ImportanceScores,
    importance,
    importance_cdf,
    keep_count,
    load_cameras,
    look_at,
    project,
    prune,
    psnr,
    quantile_normalizer,
    render,
    save_cameras,
    view_dependent_importance,
    view_independent_importance,
)
from splatcodec.transform import quat_to_rotation


def _cam(w=24, h=18, f=20.0):
    return Camera(np.eye(4), (f, f), (w / 2, h / 2), w, h)


def _cloud(pos, log_scales, logits, dc=None, quats=None):
    n = len(pos)
    return GaussianCloud(
        positions=np.asarray(pos, float),
        quaternions=np.tile([1.0, 0, 0, 0], (n, 1)) if quats is None else np.asarray(quats, float),
        log_scales=np.asarray(log_scales, float),
        opacity_logits=np.asarray(logits, float).reshape(n, 1),
        sh_dc=np.zeros((n, 3)) if dc is None else np.asarray(dc, float),
        sh_rest=np.zeros((n, 0)),
        sh_degree=0,
    )


def _reference_render(cloud, cam):
    """Scalar per-pixel compositor written independently of the vectorised one."""
    n = len(cloud)
    splats = []
    for i in range(n):
        s = project(activate(cloud, i), cam)
        if s is None:
            continue
        cov = s.cov2d + DILATION * np.eye(2)
        color = np.maximum(SH_C0 * cloud.sh_dc[i].astype(float) + 0.5, 0)
        splats.append((s.depth, i, s.mean2d, np.linalg.inv(cov), s.opacity, color))
    splats.sort(key=lambda t: (t[0], t[1]))
    img = np.ones((cam.height, cam.width, 3))
    acc = np.zeros(n)
    for r in range(cam.height):
        for c in range(cam.width):
            t = 1.0
            rgb = np.zeros(3)
            p = np.array([c + 0.5, r + 0.5])
            for _, i, mean, inv, op, color in splats:
                d = p - mean
                md = d @ inv @ d
                if md > 9:
                    continue
                a = op * math.exp(-0.5 * md)
                if a < ALPHA_MIN:
                    continue
                acc[i] += t * a
                rgb += t * a * color
                t *= 1 - a
            img[r, c] = rgb + t
    return img, acc


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(np.diag([2.0, 1, 1, 1]), (1, 1), (0, 0), 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(4), (1, 1), (0, 0), 0, 4)


def test_camera_json_roundtrip(tmp_path):
    cams = [look_at([3, 1, 2], [0, 0, 0], [0, -1, 0], 50, 32, 24), _cam()]
    save_cameras(tmp_path / "c.json", cams)
    back = load_cameras(tmp_path / "c.json")
    assert all(np.allclose(a.world_to_camera, b.world_to_camera) for a, b in zip(cams, back))
    (tmp_path / "bad.json").write_text(json.dumps({"x": 1}))
    with pytest.raises(ValueError):
        load_cameras(tmp_path / "bad.json")


def test_project_on_axis():
    z, f = 4.0, 20.0
    g = activate(_cloud([[0, 0, z]], [[0, 0, 0]], [0]), 0)
    s = project(g, _cam(f=f))
    assert np.allclose(s.mean2d, [12, 9])
    assert np.allclose(s.cov2d, (f / z) ** 2 * np.eye(2))
    assert project(activate(_cloud([[0, 0, -1]], [[0, 0, 0]], [0]), 0), _cam()) is None


def _pix(p, cam):
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    q = cam.world_to_camera[:3, :3] @ p + cam.world_to_camera[:3, 3]
    return np.array([fx * q[0] / q[2] + cx, fy * q[1] / q[2] + cy])


@given(st.integers(0, 2**31))
def test_project_numerical_jacobian(seed):
    rng = np.random.default_rng(seed)
    cam = look_at(rng.normal(size=3) * 0.3 + [0, 0, -5], [0, 0, 0], [0, -1, 0], 40, 64, 48)
    cloud = random_cloud(rng, 1, degree=0)
    g = activate(cloud, 0)
    s = project(g, cam)
    if s is None:
        return
    jac = np.zeros((2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-6
        jac[:, k] = (_pix(g.position + e, cam) - _pix(g.position - e, cam)) / 2e-6
    r = quat_to_rotation(g.rotation)
    sigma = r @ np.diag(g.scale**2) @ r.T
    assert np.allclose(s.cov2d, jac @ sigma @ jac.T, rtol=1e-5, atol=1e-9)
    assert np.allclose(s.mean2d, _pix(g.position, cam))


def test_isotropic_rotation_invariant():
    rng = np.random.default_rng(0)
    base = _cloud([[0.1, -0.2, 3]], [[-1.5] * 3], [1.0], dc=[[0.3, -0.2, 0.9]])
    img0, acc0 = render(base, _cam())
    for q in rng.normal(size=(5, 4)):
        c = _cloud([[0.1, -0.2, 3]], [[-1.5] * 3], [1.0], dc=[[0.3, -0.2, 0.9]], quats=[q])
        img, acc = render(c, _cam())
        assert np.abs(img - img0).max() <= 1e-12 and abs(acc[0] - acc0[0]) <= 1e-12


def test_empty_render():
    img, acc = render(None, _cam())
    assert np.all(img == 1) and acc.size == 0


def test_matches_reference_renderer():
    rng = np.random.default_rng(5)
    n = 25
    cloud = _cloud(
        rng.normal(size=(n, 3)) * [0.4, 0.3, 0.3] + [0, 0, 3],
        rng.normal(-2.2, 0.5, size=(n, 3)),
        rng.normal(0.5, 1.5, size=n),
        dc=rng.normal(size=(n, 3)),
        quats=rng.normal(size=(n, 4)),
    )
    cam = _cam()
    img, acc = render(cloud, cam)
    rimg, racc = _reference_render(cloud, cam)
    assert np.allclose(img, rimg, atol=1e-10)
    assert np.allclose(acc, racc, atol=1e-10)


def test_single_centred_gaussian():
    cloud = _cloud([[0, 0, 3]], [[-1.0] * 3], [8.0], dc=[[0.4, -0.1, 0.2]])
    cam = _cam(w=25, h=25)
    img, acc = render(cloud, cam)
    _, racc = _reference_render(cloud, cam)
    assert acc[0] == pytest.approx(racc[0], rel=1e-12)
    alpha = 1 / (1 + math.exp(-8.0))
    want = (1 - alpha) + alpha * (SH_C0 * np.array([0.4, -0.1, 0.2]) + 0.5)
    assert np.allclose(img[12, 12], want, atol=1e-6)


def _wide_pair():
    # huge footprint so alpha is 0.5 on every pixel
    return _cloud([[0, 0, 5], [0, 0, 5]], [[14.0] * 3] * 2, [0.0, 0.0])


def test_colocated_half_alpha():
    cam = _cam()
    _, acc = render(_wide_pair(), cam)
    pixels = cam.width * cam.height
    assert acc[0] == pytest.approx(0.5 * pixels, rel=1e-9)
    assert acc[1] == pytest.approx(0.25 * pixels, rel=1e-9)


def test_duplicate_cameras_double():
    cloud = random_cloud(np.random.default_rng(2), 40, degree=0)
    cam = look_at([0, 0, -4], [0, 0, 0], [0, -1, 0], 30, 32, 24)
    one = view_dependent_importance(cloud, [cam])
    assert np.array_equal(one, render(cloud, cam)[1])
    assert np.array_equal(view_dependent_importance(cloud, [cam, cam]), 2 * one)
    with pytest.raises(ValueError):
        view_dependent_importance(cloud, [])


def test_occluded_gaussian():
    cloud = _cloud([[0, 0, 2], [0, 0, 4]], [[12.0] * 3, [-1.0] * 3], [30.0, 5.0])
    acc = view_dependent_importance(cloud, [_cam()])
    assert acc[0] > 100 and acc[1] < 1e-6


def test_input_order_invariance():
    rng = np.random.default_rng(9)
    cloud = random_cloud(rng, 60, degree=0)
    cam = look_at([0, 0, -4], [0, 0, 0], [0, -1, 0], 30, 32, 24)
    _, acc = render(cloud, cam)
    perm = rng.permutation(60)
    _, acc_p = render(cloud.subset(perm), cam)
    assert np.allclose(acc_p, acc[perm], atol=1e-12)


def test_transmittance_weights_bounded(small_scene):
    cloud, cams = small_scene
    img, _ = render(cloud, cams[0])
    colors = cloud.base_colors()
    assert img.min() >= 0 and img.max() <= max(1.0, colors.max()) + 1e-9


def test_normalizer_example():
    assert quantile_normalizer(np.arange(1, 11)) == 9
    cloud = _cloud(np.zeros((10, 3)), np.log(np.arange(1, 11))[:, None] * [1, 0, 0], np.zeros(10))
    s = view_independent_importance(cloud, beta=1.0)
    assert np.allclose(s, np.clip(np.arange(1, 11) / 9, 0, 1))
    assert np.all(view_independent_importance(cloud, 0.0) == 1)
    with pytest.raises(ValueError):
        view_independent_importance(cloud, -1)


@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_normalizer_scale_free(seed, shift):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 50)
    moved = _cloud(cloud.positions, cloud.log_scales.astype(float) + shift / 3, np.zeros(50))
    a = view_independent_importance(cloud, 0.5)
    b = view_independent_importance(moved, 0.5)
    assert np.allclose(a, b, atol=1e-5)


def test_no_cameras_is_view_independent(rng):
    cloud = random_cloud(rng, 30)
    s = importance(cloud, None, beta=0.3)
    assert np.all(s.i_d == 1) and np.array_equal(s.i_g, s.i_i)


def test_prune_examples(rng):
    cloud = random_cloud(rng, 4)
    out, kept = prune(cloud, np.array([4.0, 3, 2, 1]), 0.5)
    assert list(kept) == [0, 1]
    out, kept = prune(cloud, np.ones(4), 1.0)
    assert out is cloud and list(kept) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        prune(cloud, np.ones(4), 1.5)
    with pytest.raises(ValueError):
        prune(cloud, np.ones(4), 0.0)
    assert keep_count(10, 0.3) == 3 and keep_count(7, 0.5) == 4


@given(st.lists(st.integers(0, 6).map(float), min_size=1, max_size=60), st.floats(0.05, 1.0))
def test_prune_sort_oracle(scores, tau):
    n = len(scores)
    cloud = random_cloud(np.random.default_rng(0), n)
    k = keep_count(n, tau)
    if k == 0:
        return
    oracle = sorted(sorted(range(n), key=lambda i: (-scores[i], i))[:k])
    out, kept = prune(cloud, ImportanceScores.combine(scores, np.ones(n)), tau)
    assert list(kept) == oracle and len(out) == k == math.ceil(round(tau * n, 9))
    again, kept2 = prune(out, np.asarray(scores)[kept], 1.0)
    assert list(kept2) == list(range(k))


def test_cdf_examples():
    uni = importance_cdf(np.ones(4))
    assert all(abs(x - y) < 1e-9 for x, y in uni)
    single = dict(importance_cdf([0, 0, 0, 1.0]))
    assert single[75.0] == 0 and single[100.0] == 100
    with pytest.raises(ValueError):
        importance_cdf([0.0, 0.0])


def test_cdf_prefix_oracle():
    s = np.random.default_rng(3).exponential(size=200)
    curve = importance_cdf(s)
    pref = np.cumsum(np.sort(s)) / s.sum() * 100
    ys = np.array([y for _, y in curve])
    assert np.allclose(ys[1:], pref) and np.all(np.diff(ys) >= 0)
    # convex: increments grow
    assert np.all(np.diff(ys, 2) >= -1e-9)


def test_psnr_identity():
    a = np.random.default_rng(0).random((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
