"""The full scene model and its differentiable render pipeline.

A render goes kernels -> primitives -> (mapped colours, uncertainties) ->
EWA projection -> blending of a 7-channel payload (raw RGB, mapped RGB,
uncertainty). :func:`render_backward` runs the same chain in reverse and
returns a gradient for every optimised array, keyed like :meth:`Model.params`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .appearance import AppearanceMapper, init_light_embeddings, map_colors, map_colors_backward
from .raster import (Raster, make_splats, project, project_gradients, rasterize,
                     rasterize_backward)
from .scene import (Camera, KernelHeads, Kernels, SceneConfig, build_covariance,
                    derive_backward, derive_primitives, init_from_points)
from .uncertainty import UncertaintyHead, predict_uncertainties, uncertainty_backward

RAW, MAPPED, BETA = slice(0, 3), slice(3, 6), slice(6, 7)
GEOMETRY_CHANNELS = np.array([1, 1, 1, 1, 1, 1, 0], dtype=bool)


@dataclass
class Model:
    cfg: SceneConfig
    kernels: Kernels
    heads: KernelHeads
    mapper: AppearanceMapper
    uncert: UncertaintyHead
    light_emb: np.ndarray  # (n_images, D_l)
    trans_emb: np.ndarray  # (n_images, D_tau)
    image_ids: list = field(default_factory=list)
    light_dim: int = 32
    transient_dim: int = 16
    background: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def create(cls, points, image_ids, cfg: SceneConfig, rng: np.random.Generator,
               light_dim: int = 32, transient_dim: int = 16) -> "Model":
        kernels = init_from_points(points, cfg, rng)
        heads = KernelHeads.create(cfg, rng)
        mapper = AppearanceMapper.create(cfg.appearance_dim, light_dim, rng, hidden=cfg.hidden)
        uncert = UncertaintyHead.create(cfg.uncertainty_dim, transient_dim, cfg.n_offsets, rng,
                                        hidden=cfg.hidden)
        n = len(image_ids)
        return cls(cfg, kernels, heads, mapper, uncert,
                   init_light_embeddings(n, light_dim, rng),
                   init_light_embeddings(n, transient_dim, rng),
                   list(image_ids), light_dim, transient_dim)

    def image_index(self, image_id: str) -> int:
        try:
            return self.image_ids.index(image_id)
        except ValueError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def params(self) -> dict:
        """Every optimised array, keyed by a stable name."""
        out = {f"kernels.{n}": getattr(self.kernels, n) for n in Kernels.PARAMS}
        for name, mlp in self.heads.items():
            for i, p in enumerate(mlp.params()):
                out[f"heads.{name}.{i}"] = p
        for i, p in enumerate(self.mapper.mlp.params()):
            out[f"mapper.{i}"] = p
        for i, p in enumerate(self.uncert.mlp.params()):
            out[f"uncert.{i}"] = p
        out["embed.light"] = self.light_emb
        out["embed.transient"] = self.trans_emb
        return out

    def set_params(self, params: dict) -> None:
        for n in Kernels.PARAMS:
            setattr(self.kernels, n, params[f"kernels.{n}"])
        for name, mlp in self.heads.items():
            mlp.set_params([params[f"heads.{name}.{i}"] for i in range(len(mlp.params()))])
        m = self.mapper.mlp
        m.set_params([params[f"mapper.{i}"] for i in range(len(m.params()))])
        u = self.uncert.mlp
        u.set_params([params[f"uncert.{i}"] for i in range(len(u.params()))])
        self.light_emb = params["embed.light"]
        self.trans_emb = params["embed.transient"]

    def copy(self) -> "Model":
        new = Model(self.cfg, self.kernels.copy(),
                    KernelHeads(*(m.copy() for _, m in self.heads.items())),
                    AppearanceMapper(self.mapper.mlp.copy(), self.mapper.appearance_dim,
                                     self.mapper.light_dim),
                    UncertaintyHead(self.uncert.mlp.copy(), self.uncert.unc_dim,
                                    self.uncert.transient_dim, self.uncert.beta_min),
                    self.light_emb.copy(), self.trans_emb.copy(), list(self.image_ids),
                    self.light_dim, self.transient_dim, tuple(self.background))
        return new


@dataclass
class RenderOutput:
    raw: np.ndarray  # (H, W, 3)
    mapped: np.ndarray  # (H, W, 3)
    uncertainty: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W)


@dataclass
class RenderContext:
    camera: Camera
    derive_cache: object
    map_cache: object
    unc_cache: object
    prims: object
    proj: object
    raster: Raster
    light: np.ndarray
    transient: np.ndarray
    visible_kernels: np.ndarray


def render(model: Model, camera: Camera, light, transient, mode: str = "eval",
           rng: Optional[np.random.Generator] = None, tile_size: int = 16):
    """Render one view; returns ``(RenderOutput, RenderContext)``."""
    kern = model.kernels
    n, h = len(kern), kern.n_offsets
    light = np.asarray(light, dtype=np.float64)
    transient = np.asarray(transient, dtype=np.float64)
    prims, dcache = derive_primitives(kern, model.heads, camera.center)
    dirs_rows = np.repeat(dcache.dirs, h, axis=0)
    app_rows = np.repeat(kern.app_emb, h, axis=0)
    mapped, mcache = map_colors(prims.colors, app_rows, light, dirs_rows, model.mapper, mode, rng)
    beta, ucache = predict_uncertainties(kern.unc_emb, transient, model.uncert)
    prims.mapped = mapped
    prims.uncertainty = beta.reshape(n * h)

    cov3d = build_covariance(prims.quats, prims.scales)
    proj = project(prims.means, cov3d, camera)
    payload = np.concatenate([prims.colors, mapped, prims.uncertainty[:, None]], 1)
    splats = make_splats(proj, prims.opacities, payload)
    bg = np.concatenate([np.asarray(model.background, dtype=np.float64), model.background,
                         [model.uncert.beta_min]])
    ras = rasterize(splats, camera.width, camera.height, tile_size, bg)
    vis = np.zeros(n, dtype=bool)
    vis[prims.parent[proj.valid]] = True
    out = RenderOutput(ras.image[..., RAW], ras.image[..., MAPPED], ras.image[..., 6],
                       ras.alpha, ras.n_contrib)
    ctx = RenderContext(camera, dcache, mcache, ucache, prims, proj, ras, light, transient, vis)
    return out, ctx


def render_backward(model: Model, ctx: RenderContext, g_raw, g_mapped, g_beta, g_scales=None):
    """Gradients of a loss w.r.t. every array in :meth:`Model.params`.

    ``g_raw``/``g_mapped`` are ``(H, W, 3)``, ``g_beta`` is ``(H, W)``;
    ``g_scales`` is an optional direct gradient on primitive scales.
    Embedding-table gradients are returned as ``(row_grad_light, row_grad_transient)``
    under the keys ``embed.light_row`` / ``embed.transient_row`` and must be
    scattered by the caller into the row of the rendered image.
    """
    kern = model.kernels
    n, h = len(kern), kern.n_offsets
    prims, proj, cam = ctx.prims, ctx.proj, ctx.camera
    grad_img = np.concatenate([g_raw, g_mapped, np.asarray(g_beta)[..., None]], axis=2)
    # the uncertainty channel trains per-primitive uncertainties only, never geometry
    sg = rasterize_backward(ctx.raster, grad_img, GEOMETRY_CHANNELS)
    m = len(prims)
    g_mu, g_q, g_s = project_gradients(sg, proj, prims.means, prims.quats, prims.scales, cam, m)
    if g_scales is not None:
        g_s = g_s + g_scales
    g_opac = np.zeros(m)
    g_opac[proj.valid] = sg.opacity
    g_payload = np.zeros((m, 7))
    g_payload[proj.valid] = sg.payload

    # colour mapper
    g_raw_c, g_app_rows, g_light_rows, g_dir_rows, g_mapper = map_colors_backward(
        ctx.map_cache, model.mapper, g_payload[:, MAPPED])
    g_colors = g_payload[:, RAW] + g_raw_c
    g_app = g_app_rows.reshape(n, h, -1).sum(axis=1)
    g_dirs = g_dir_rows.reshape(n, h, 3).sum(axis=1)

    # uncertainty head
    g_unc, g_trans, g_uhead = uncertainty_backward(ctx.unc_cache, model.uncert,
                                                   g_payload[:, 6].reshape(n, h))

    kgrads, hgrads = derive_backward(ctx.derive_cache, g_mu, g_q, g_s, g_opac, g_colors, g_dirs)
    out = {f"kernels.{k}": v for k, v in kgrads.items()}
    out["kernels.app_emb"] = g_app
    out["kernels.unc_emb"] = g_unc
    for name, grads in hgrads.items():
        for i, g in enumerate(grads):
            out[f"heads.{name}.{i}"] = g
    for i, g in enumerate(g_mapper):
        out[f"mapper.{i}"] = g
    for i, g in enumerate(g_uhead):
        out[f"uncert.{i}"] = g
    out["embed.light_row"] = g_light_rows.sum(axis=0)
    out["embed.transient_row"] = g_trans
    return out
