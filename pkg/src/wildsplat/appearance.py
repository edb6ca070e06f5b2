"""Per-image light embeddings and the shared colour mapper.

The mapper predicts a residual in logit space, so a zero-initialised output
layer leaves raw colours untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Mlp, ShapeError, sigmoid

LOGIT_CLAMP = 1e-4


def init_light_embeddings(count: int, dim: int, rng: np.random.Generator, std: float = 0.01):
    if count < 1:
        raise ValueError("need at least one image to create light embeddings")
    return rng.normal(0.0, std, size=(count, dim))


def logit(p):
    p = np.clip(p, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return np.log(p) - np.log1p(-p)


@dataclass
class AppearanceMapper:
    mlp: Mlp
    appearance_dim: int
    light_dim: int

    @classmethod
    def create(cls, appearance_dim: int, light_dim: int, rng, hidden: int = 64,
               dropout: float = 0.2) -> "AppearanceMapper":
        width = 3 + appearance_dim + light_dim + 3
        mlp = Mlp.create([width, hidden, hidden, 3], rng, dropout=dropout, final_scale=0.0)
        return cls(mlp, appearance_dim, light_dim)

    @property
    def input_width(self) -> int:
        return 3 + self.appearance_dim + self.light_dim + 3


@dataclass
class MapCache:
    raw: np.ndarray
    mapped: np.ndarray
    mlp_cache: object
    n_rows: int


def map_colors(raw, app_emb, light, dirs, mapper: AppearanceMapper, mode="eval", rng=None):
    """Lighting-conditioned colours ``sigmoid(logit(raw) + F_theta(raw, app, light, dir))``.

    ``raw`` is ``(M, 3)``; ``app_emb``, ``dirs`` are per row ``(M, .)``; ``light``
    is a single vector broadcast to every row (or ``(M, D_l)``).
    Returns ``(mapped, cache)``.
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
    m = raw.shape[0]
    light = np.asarray(light, dtype=np.float64)
    if light.ndim == 1:
        light = np.broadcast_to(light, (m, light.shape[0]))
    app_emb = np.asarray(app_emb, dtype=np.float64).reshape(m, -1)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(m, 3)
    if app_emb.shape[1] != mapper.appearance_dim or light.shape[1] != mapper.light_dim:
        raise ShapeError(
            f"mapper expects appearance/light dims {mapper.appearance_dim}/{mapper.light_dim}, "
            f"got {app_emb.shape[1]}/{light.shape[1]}"
        )
    x = np.concatenate([raw, app_emb, light, dirs], axis=1)
    delta, cache = mapper.mlp.forward(x, mode, rng)
    mapped = sigmoid(logit(raw) + delta)
    return mapped, MapCache(raw, mapped, cache, m)


def map_colors_backward(cache: MapCache, mapper: AppearanceMapper, grad_mapped):
    """Returns ``(g_raw, g_app, g_light_rows, g_dirs, mlp_grads)``."""
    g_logit = grad_mapped * cache.mapped * (1.0 - cache.mapped)
    g_in, mlp_grads = mapper.mlp.backward(cache.mlp_cache, g_logit)
    raw = cache.raw
    inside = (raw > LOGIT_CLAMP) & (raw < 1.0 - LOGIT_CLAMP)
    g_raw = g_in[:, :3] + np.where(inside, g_logit / (raw * (1.0 - raw)), 0.0)
    a0 = 3
    a1 = a0 + mapper.appearance_dim
    l1 = a1 + mapper.light_dim
    return g_raw, g_in[:, a0:a1], g_in[:, a1:l1], g_in[:, l1:], mlp_grads
