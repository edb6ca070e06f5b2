import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_camera, tiny_model
from oracles import central_diff, rel_err
from wildsplat.model import render
from wildsplat.scene import (Camera, DegenerateDirectionError, KernelHeads, SceneConfig,
                             build_covariance, covariance_backward, derive_primitives,
                             init_from_points, prune_kernels, quat_to_rotmat, view_direction)

RNG = np.random.default_rng


def small_cfg(**kw):
    base = dict(n_offsets=4, feature_dim=6, appearance_dim=3, uncertainty_dim=2, hidden=8,
                sky_count=0, voxel_size=1.0)
    base.update(kw)
    return SceneConfig(**base)


def test_single_point_single_kernel():
    k = init_from_points(np.zeros((1, 3)), small_cfg(), RNG(0))
    assert len(k) == 1
    np.testing.assert_array_equal(k.anchors[0], [0, 0, 0])


def test_cube_corners_one_kernel_each():
    corners = np.array([[x, y, z] for x in (0.5, 1.5) for y in (0.5, 1.5) for z in (0.5, 1.5)])
    assert len(init_from_points(corners, small_cfg(), RNG(0))) == 8


def test_ball_with_sky():
    rng = RNG(3)
    pts = rng.normal(size=(1000, 3))
    pts /= np.maximum(1.0, np.linalg.norm(pts, axis=1))[:, None]
    cfg = small_cfg(voxel_size=0.4, sky_count=64)
    k = init_from_points(pts, cfg, RNG(0))
    occupied = {tuple(np.floor(p / 0.4).astype(int)) for p in pts}
    assert len(k) == len(occupied) + 64
    centroid = pts.mean(axis=0)
    radius = np.max(np.linalg.norm(pts - centroid, axis=1)) * cfg.sky_radius_mult
    dist = np.linalg.norm(k.anchors[k.is_sky] - centroid, axis=1)
    np.testing.assert_allclose(dist, radius, atol=1e-6)
    assert k.is_sky.sum() == 64


def test_empty_points_rejected():
    with pytest.raises(ValueError):
        init_from_points(np.zeros((0, 3)), small_cfg(), RNG(0))


def test_offset_position_exact():
    cfg = small_cfg(n_offsets=1)
    k = init_from_points(np.zeros((1, 3)), cfg, RNG(0))
    k.log_scale[:] = np.log(2.0)
    k.offsets[0, 0] = [1.0, 0.0, 0.0]
    prims, _ = derive_primitives(k, KernelHeads.create(cfg, RNG(1)), [0, 0, -5])
    np.testing.assert_array_equal(prims.means[0], [2.0, 0.0, 0.0])


def test_zero_color_head_gives_gray():
    cfg = small_cfg()
    heads = KernelHeads.create(cfg, RNG(1))
    heads.color.weights[-1][:] = 0.0
    heads.color.biases[-1][:] = 0.0
    k = init_from_points(RNG(2).normal(size=(20, 3)), cfg, RNG(0))
    prims, _ = derive_primitives(k, heads, [0, 0, -5])
    np.testing.assert_array_equal(prims.colors, 0.5)


def test_positions_match_loop_and_types():
    cfg = small_cfg()
    k = init_from_points(RNG(4).normal(size=(40, 3)), cfg, RNG(0))
    prims, _ = derive_primitives(k, KernelHeads.create(cfg, RNG(1)), [0.3, 0.1, -4])
    h = cfg.n_offsets
    for u in range(len(k)):
        ku = float(np.exp(k.log_scale[u]))
        for i in range(h):
            expect = [k.anchors[u, c] + k.offsets[u, i, c] * ku for c in range(3)]
            assert rel_err(prims.means[u * h + i], expect) < 1e-12
    assert np.all((prims.opacities > 0) & (prims.opacities < 1))
    assert np.all(prims.scales > 0)
    np.testing.assert_allclose(np.linalg.norm(prims.quats, axis=1), 1.0, atol=1e-12)


def test_same_center_same_primitives():
    m = tiny_model()
    a, _ = derive_primitives(m.kernels, m.heads, [1.0, 2.0, -3.0])
    b, _ = derive_primitives(m.kernels, m.heads, np.array([1.0, 2.0, -3.0]))
    assert np.array_equal(a.colors, b.colors) and np.array_equal(a.means, b.means)


@pytest.mark.parametrize("xu,xv,expect", [((1, 0, 0), (0, 0, 0), (1, 0, 0)),
                                          ((0, 3, 4), (0, 0, 0), (0, 0.6, 0.8))])
def test_view_direction_values(xu, xv, expect):
    np.testing.assert_allclose(view_direction(xu, xv), expect, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=6, max_size=6))
def test_view_direction_antisymmetric(v):
    a, b = np.array(v[:3]), np.array(v[3:])
    if np.linalg.norm(a - b) < 1e-6:
        return
    np.testing.assert_array_equal(view_direction(a, b), -view_direction(b, a))


def test_view_direction_degenerate():
    with pytest.raises(DegenerateDirectionError):
        view_direction([1, 2, 3], [1, 2, 3])


def test_covariance_identity_rotation():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [1, 2, 3]), np.diag([1, 4, 9]),
                               atol=1e-15)


def test_covariance_quarter_turn():
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    np.testing.assert_allclose(build_covariance(q, [2, 1, 1]), np.diag([1, 4, 1]), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_covariance_eigenvalues(seed):
    rng = RNG(seed)
    q = rng.normal(size=4)
    s = rng.uniform(0.1, 3.0, 3)
    ev = np.linalg.eigvalsh(build_covariance(q, s))
    np.testing.assert_allclose(ev, np.sort(s**2), atol=1e-9)


def test_quaternion_is_normalised():
    q = np.array([2.0, 0.4, -1.0, 0.3])
    r = quat_to_rotmat(q)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(r, quat_to_rotmat(q / 7.0), atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_covariance_gradients(seed):
    rng = RNG(seed)
    q, s, g = rng.normal(size=4), rng.uniform(0.2, 2.0, 3), rng.normal(size=(3, 3))
    gq, gs = covariance_backward(q, s, g)
    assert rel_err(gq, central_diff(lambda v: np.sum(build_covariance(v, s) * g), q.copy())) < 1e-4
    assert rel_err(gs, central_diff(lambda v: np.sum(build_covariance(q, v) * g), s.copy())) < 1e-4


def test_isotropic_rotation_gradient_vanishes():
    rng = RNG(0)
    gq, _ = covariance_backward(rng.normal(size=4), np.full(3, 0.7), rng.normal(size=(3, 3)))
    assert np.max(np.abs(gq)) < 1e-6


def test_prune_all_zero():
    k = init_from_points(RNG(0).normal(size=(50, 3)), small_cfg(sky_count=8), RNG(0))
    out, rep = prune_kernels(k, 0.01, 100)
    assert len(out) == 8 and out.is_sky.all()
    assert rep.before == len(k) and rep.after == 8


def test_prune_none_resets():
    k = init_from_points(RNG(0).normal(size=(50, 3)), small_cfg(), RNG(0))
    k.acc_opacity[:] = 5.0
    out, rep = prune_kernels(k, 0.01, 100)
    assert len(out) == len(k) and not out.acc_opacity.any()
    np.testing.assert_array_equal(out.anchors, k.anchors)


def test_prune_mixed_matches_filter():
    k = init_from_points(RNG(1).normal(size=(80, 3)), small_cfg(sky_count=4), RNG(0))
    k.acc_opacity[:] = RNG(2).uniform(0, 2, len(k))
    out, _ = prune_kernels(k, 0.01, 100)
    keep = [i for i in range(len(k)) if k.is_sky[i] or k.acc_opacity[i] >= 1.0]
    np.testing.assert_array_equal(out.anchors, k.anchors[keep])


def test_prune_transparent_kernels_barely_changes_render():
    m = tiny_model(randomize_mapper=False)
    cam = tiny_camera()
    op = m.heads.opacity
    for w, b in zip(op.weights, op.biases):
        w[:] = 0.0
        b[:] = 0.0
    # opacity = sigmoid(-100 * relu(feature_0)): kernels with feature_0 = 1 are transparent
    op.weights[0][0, 0] = 1.0
    op.weights[1][0, 0] = 1.0
    op.weights[2][:, 0] = -100.0
    dead = np.arange(len(m.kernels)) % 3 == 0
    m.kernels.features[:, 0] = np.where(dead, 1.0, -1.0)
    m.kernels.acc_opacity[:] = np.where(dead, 0.0, 10.0)
    before, _ = render(m, cam, np.zeros(4), np.zeros(3))
    m.kernels, rep = prune_kernels(m.kernels, 0.005, 100)
    after, _ = render(m, cam, np.zeros(4), np.zeros(3))
    assert len(rep.removed) == dead.sum() > 0
    assert np.max(np.abs(after.raw - before.raw)) < 1e-3
    assert np.max(np.abs(after.mapped - before.mapped)) < 1e-3


def test_camera_look_at_orthonormal():
    cam = Camera.look_at([1, 2, -5], [0, 0, 0], [0, -1, 0], 50, 50, 10, 10, 20, 20)
    cam.validate()
    np.testing.assert_allclose(cam.center, [1, 2, -5], atol=1e-12)
