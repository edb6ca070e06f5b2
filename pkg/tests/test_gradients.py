"""Finite-difference checks of the full render pipeline, from every parameter to the image."""

import numpy as np
import pytest

from conftest import tiny_camera, tiny_model
from wildsplat.model import render, render_backward

RNG = np.random.default_rng
GEOMETRY_FREE = ("kernels.unc_emb", "uncert.")


def setup(seed):
    m = tiny_model(seed, n_points=12)
    rng = RNG(1000 + seed)
    # random biases keep ReLU units away from their kink
    for mlp in [*(mlp for _, mlp in m.heads.items()), m.mapper.mlp, m.uncert.mlp]:
        mlp.biases = [rng.normal(0, 0.3, b.shape) for b in mlp.biases]
    cam = tiny_camera(18, 14, z=-5.0)
    light, trans = rng.normal(0, 0.5, m.light_dim), rng.normal(0, 0.5, m.transient_dim)
    h, w = cam.height, cam.width
    return m, cam, light, trans, rng.normal(size=(h, w, 3)), rng.normal(size=(h, w, 3)), \
        rng.normal(size=(h, w))


def objective(m, cam, light, trans, g_raw, g_mapped, g_beta):
    out, _ = render(m, cam, light, trans)
    return float(np.sum(out.raw * g_raw) + np.sum(out.mapped * g_mapped)
                 + np.sum(out.uncertainty * g_beta))


def check(seed, g_raw_on, g_beta_on, names_filter):
    m, cam, light, trans, g_raw, g_mapped, g_beta = setup(seed)
    if not g_raw_on:
        g_raw, g_mapped = np.zeros_like(g_raw), np.zeros_like(g_mapped)
    if not g_beta_on:
        g_beta = np.zeros_like(g_beta)
    _, ctx = render(m, cam, light, trans)
    grads = render_backward(m, ctx, g_raw, g_mapped, g_beta)
    rng = RNG(seed)
    params = m.params()
    worst = {}
    targets = [(n, params[n], grads[n]) for n in params if n.startswith(names_filter)
               and not n.startswith("embed.")]
    targets += [("light", light, grads["embed.light_row"]),
                ("transient", trans, grads["embed.transient_row"])]
    for name, arr, g in targets:
        idx = rng.choice(arr.size, size=min(arr.size, 6), replace=False)
        fd = np.empty(len(idx))
        for j, k in enumerate(idx):
            flat = arr.reshape(-1)
            old = flat[k]
            step = 1e-6 * max(1.0, abs(old))
            flat[k] = old + step
            fp = objective(m, cam, light, trans, g_raw, g_mapped, g_beta)
            flat[k] = old - step
            fm = objective(m, cam, light, trans, g_raw, g_mapped, g_beta)
            flat[k] = old
            fd[j] = (fp - fm) / (2 * step)
        an = g.reshape(-1)[idx]
        # relative to the scale of the whole gradient array, so tiny sampled entries don't
        # turn finite-difference roundoff into a large ratio
        scale = max(np.max(np.abs(g)), np.max(np.abs(fd)), 1e-8)
        worst[name] = float(np.max(np.abs(an - fd)) / scale)
    return worst


def pipeline_errors(seed):
    """Max relative error per parameter group for both colour and uncertainty paths."""
    colour = check(seed, True, False, ("kernels.", "heads.", "mapper."))
    unc = check(seed, False, True, GEOMETRY_FREE)
    return {**{f"colour:{k}": v for k, v in colour.items()},
            **{f"uncert:{k}": v for k, v in unc.items()}}


@pytest.mark.parametrize("seed", range(20))
def test_pipeline_gradients(seed):
    errs = pipeline_errors(seed)
    bad = {k: v for k, v in errs.items() if v >= 1e-4}
    assert not bad, bad


def test_uncertainty_channel_detached_from_geometry():
    m, cam, light, trans, _, _, g_beta = setup(0)
    _, ctx = render(m, cam, light, trans)
    zero = np.zeros((cam.height, cam.width, 3))
    grads = render_backward(m, ctx, zero, zero, g_beta)
    for name in ("kernels.anchors", "kernels.offsets", "kernels.log_scale", "heads.opacity.0"):
        assert not grads[name].any(), name
    assert grads["kernels.unc_emb"].any()
