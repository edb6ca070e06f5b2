import math

import numpy as np
import pytest

from oracles import central_diff, golden_section, rel_err, ssim_loop
from wildsplat.losses import (C1, LossConfig, color_loss, dssim, l1_with_grad, reg_loss, ssim,
                              ssim_with_grad, total_loss, uncertainty_loss)

RNG = np.random.default_rng


def test_ssim_identical():
    a = RNG(0).uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert dssim(a, a) == pytest.approx(0.0, abs=1e-12)


def test_ssim_constant_images():
    assert ssim(np.zeros((12, 12)), np.ones((12, 12))) == pytest.approx(C1 / (1 + C1), rel=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_window_loop(seed):
    rng = RNG(seed)
    a, b = rng.uniform(size=(16, 19, 3)), rng.uniform(size=(16, 19, 3))
    assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-6


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@pytest.mark.parametrize("seed", range(20))
def test_ssim_gradient(seed):
    rng = RNG(seed)
    a, b = rng.uniform(size=(13, 14, 2)), rng.uniform(size=(13, 14, 2))
    _, g = ssim_with_grad(a, b)
    assert rel_err(g, central_diff(lambda x: ssim(x, b), a.copy(), 1e-5)) < 1e-4


def test_color_loss_cases():
    rng = RNG(1)
    c = rng.uniform(0.2, 0.8, (12, 12, 3))
    assert color_loss(c, c, c) == pytest.approx(0.0, abs=1e-12)
    assert color_loss(c, c + 0.1, c, lam=0.0) == pytest.approx(0.1, abs=1e-12)
    raw = rng.uniform(size=c.shape)
    assert color_loss(raw, rng.uniform(size=c.shape), c, lam=1.0) == dssim(raw, c)


def test_uncertainty_loss_values():
    val, _ = uncertainty_loss(np.full((4, 4), 0.5), np.ones((4, 4)), 0.5)
    assert val == pytest.approx(0.25, abs=1e-15)


def test_uncertainty_loss_zero_dissimilarity_monotone():
    vals = [uncertainty_loss(0.0, np.full(3, b), 0.5, beta_min=0.1)[0] for b in (0.1, 0.2, 0.5, 1.0)]
    assert all(x < y for x, y in zip(vals, vals[1:]))


def test_uncertainty_loss_minimiser():
    best = golden_section(lambda b: uncertainty_loss(0.5, np.array([b]), 0.5)[0], 0.1, 5.0)
    assert abs(best - math.sqrt(0.5 / 0.5)) < 1e-3


def test_uncertainty_loss_floor():
    with pytest.raises(ValueError):
        uncertainty_loss(0.1, np.full(2, 0.05), 0.5, beta_min=0.1)


@pytest.mark.parametrize("seed", range(20))
def test_uncertainty_loss_gradient(seed):
    rng = RNG(seed)
    d, beta = rng.uniform(0, 1, (5, 6)), rng.uniform(0.1, 2, (5, 6))
    _, g = uncertainty_loss(d, beta, 0.5)
    assert rel_err(g, central_diff(lambda b: uncertainty_loss(d, b, 0.5)[0], beta.copy(), 1e-6)) < 1e-4


def test_reg_loss_values():
    assert reg_loss(np.ones((5, 3)))[0] == 5.0
    assert reg_loss(np.array([[2.0, 3.0, 4.0]]))[0] == 24.0
    assert reg_loss(np.zeros((0, 3)))[0] == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_reg_and_l1_gradients(seed):
    rng = RNG(seed)
    s = rng.uniform(0.1, 2, (7, 3))
    assert rel_err(reg_loss(s)[1], central_diff(lambda x: reg_loss(x)[0], s.copy(), 1e-6)) < 1e-4
    a, b = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5, 3))
    assert rel_err(l1_with_grad(a, b)[1], central_diff(lambda x: l1_with_grad(x, b)[0], a.copy(), 1e-7)) < 1e-4


def images(seed, h=14, w=15):
    rng = RNG(seed)
    ref = rng.uniform(0.1, 0.9, (h, w, 3))
    raw = np.clip(ref + rng.normal(0, 0.1, ref.shape), 0, 1)
    mapped = np.clip(ref + rng.normal(0, 0.1, ref.shape), 0, 1)
    beta = rng.uniform(0.1, 1.5, (h, w))
    dis = rng.uniform(0, 1, (h, w))
    mask = rng.uniform(0.05, 1, (h, w))
    scales = rng.uniform(0.05, 0.5, (9, 3))
    return raw, mapped, ref, beta, dis, mask, scales


def test_disabled_uncertainty_is_plain_color_loss():
    raw, mapped, ref, beta, dis, mask, scales = images(0)
    cfg = LossConfig(enable_uncertainty=False)
    br, _ = total_loss(raw, mapped, ref, beta, dis, mask, scales, cfg)
    expect = color_loss(raw, mapped, ref, cfg.lam) + cfg.lam_reg * reg_loss(scales)[0]
    assert br.total == pytest.approx(expect, rel=1e-12)
    assert br.uncertainty == 0.0


def test_unit_beta_halves_color():
    raw, mapped, ref, _, dis, _, scales = images(1)
    br, _ = total_loss(raw, mapped, ref, np.ones(ref.shape[:2]), dis, None, scales, LossConfig())
    assert br.color == pytest.approx(color_loss(raw, mapped, ref) / 2, rel=1e-12)


def test_doubling_beta():
    raw, mapped, ref, beta, dis, mask, scales = images(2)
    cfg = LossConfig()
    a, _ = total_loss(raw, mapped, ref, beta, dis, mask, scales, cfg)
    b, _ = total_loss(raw, mapped, ref, 2 * beta, dis, mask, scales, cfg)
    assert b.color == pytest.approx(a.color / 4, rel=1e-12)
    u_color_part = np.mean(dis / (2 * beta**2))
    expect_u = u_color_part / 4 + cfg.lam1 * np.mean(np.log(2 * beta))
    assert b.uncertainty == pytest.approx(expect_u, rel=1e-12)
    assert b.uncertainty - a.uncertainty == pytest.approx(
        cfg.lam1 * math.log(2) - 0.75 * u_color_part, rel=1e-12)


def test_breakdown_recomposes():
    raw, mapped, ref, beta, dis, mask, scales = images(3)
    br, _ = total_loss(raw, mapped, ref, beta, dis, mask, scales, LossConfig())
    assert abs(br.recompose() - br.total) < 1e-9
    assert abs(br.dssim + br.l1 - br.color) < 1e-12


def test_larger_beta_softens_pixel():
    raw, mapped, ref, beta, dis, mask, scales = images(4)
    cfg = LossConfig(lam=0.0)
    a, _ = total_loss(raw, mapped, ref, beta, dis, mask, scales, cfg)
    beta2 = beta.copy()
    beta2[3, 4] *= 1.5
    b, _ = total_loss(raw, mapped, ref, beta2, dis, mask, scales, cfg)
    assert b.color < a.color
    u_a = dis[3, 4] / (2 * beta[3, 4] ** 2)
    u_b = dis[3, 4] / (2 * beta2[3, 4] ** 2)
    assert b.uncertainty - a.uncertainty > (u_b - u_a) / dis.size


def test_defaults():
    cfg = LossConfig()
    assert (cfg.lam, cfg.lam1, cfg.lam_reg) == (0.2, 0.5, 0.01)


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradients(seed):
    raw, mapped, ref, beta, dis, mask, scales = images(10 + seed)
    cfg = LossConfig()
    _, g = total_loss(raw, mapped, ref, beta, dis, mask, scales, cfg)

    def f(r=raw, m=mapped, s=scales):
        return total_loss(r, m, ref, beta, dis, mask, s, cfg)[0].total

    assert rel_err(g.raw, central_diff(lambda v: f(r=v), raw.copy(), 1e-6)) < 1e-4
    assert rel_err(g.mapped, central_diff(lambda v: f(m=v), mapped.copy(), 1e-7)) < 1e-4
    assert rel_err(g.scales, central_diff(lambda v: f(s=v), scales.copy(), 1e-6)) < 1e-4
    # beta only receives the uncertainty-loss gradient (weight is a constant)
    _, gu = uncertainty_loss(dis, beta, cfg.lam1)
    np.testing.assert_array_equal(g.beta, gu)


def test_disabled_mapping_routes_l1_to_raw():
    raw, mapped, ref, beta, dis, mask, scales = images(5)
    cfg = LossConfig(enable_mapping=False, enable_uncertainty=False)
    br, g = total_loss(raw, mapped, ref, beta, dis, mask, scales, cfg)
    assert br.l1 == pytest.approx(0.8 * np.abs(raw - ref).mean())
    assert not g.mapped.any()
