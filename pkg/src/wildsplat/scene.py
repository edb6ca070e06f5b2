"""Anchor kernels and the Gaussian primitives they spawn.

A kernel sits at ``x_u`` and owns ``h`` learnable offsets. For a given camera
centre it produces ``h`` primitives whose position is ``x_u + O_i * k_u`` and
whose opacity, rotation, scale and colour come from four shared MLP heads.
All kernel data is stored struct-of-arrays in :class:`Kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .nn import Mlp, inverse_softplus, sigmoid, softplus

FALLBACK_DIRECTION = np.array([0.0, 0.0, 1.0])


class DegenerateDirectionError(ValueError):
    """The kernel and the camera centre coincide."""


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def validate(self, tol: float = 1e-6) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=tol) or np.linalg.det(r) < 0:
            raise ValueError("camera rotation is not a proper orthonormal matrix")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera has zero image area")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        """OpenCV convention: +z forward, +y down in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(rot, -rot @ eye, fx, fy, cx, cy, width, height)


@dataclass
class SceneConfig:
    n_offsets: int = 10
    feature_dim: int = 32
    appearance_dim: int = 32
    uncertainty_dim: int = 16
    voxel_size: Optional[float] = None  # None: 4x median nearest-neighbour distance
    sky_count: int = 64
    sky_radius_mult: float = 3.0
    hidden: int = 64
    init_opacity: float = 0.1
    init_scale: float = 0.25  # fraction of k_u


@dataclass
class Kernels:
    anchors: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, F)
    log_scale: np.ndarray  # (N,) log k_u
    offsets: np.ndarray  # (N, h, 3)
    app_emb: np.ndarray  # (N, D_a)
    unc_emb: np.ndarray  # (N, D_beta)
    acc_opacity: np.ndarray  # (N,)
    is_sky: np.ndarray  # (N,) bool

    # optimised arrays; acc_opacity and is_sky are bookkeeping
    PARAMS = ("anchors", "features", "log_scale", "offsets", "app_emb", "unc_emb")

    def __len__(self):
        return self.anchors.shape[0]

    @property
    def n_offsets(self) -> int:
        return self.offsets.shape[1]

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def subset(self, keep) -> "Kernels":
        return Kernels(**{f.name: getattr(self, f.name)[keep].copy() for f in fields(self)})

    def copy(self) -> "Kernels":
        return self.subset(slice(None))


@dataclass
class KernelHeads:
    """Shared opacity / rotation / scale / colour MLPs."""

    opacity: Mlp
    rotation: Mlp
    scale: Mlp
    color: Mlp

    NAMES = ("opacity", "rotation", "scale", "color")

    @classmethod
    def create(cls, cfg: SceneConfig, rng: np.random.Generator) -> "KernelHeads":
        h, f, w = cfg.n_offsets, cfg.feature_dim, cfg.hidden
        quat_bias = np.tile([1.0, 0.0, 0.0, 0.0], h)
        return cls(
            opacity=Mlp.create([f, w, w, h], rng, final_scale=0.1,
                               final_bias=np.log(cfg.init_opacity / (1 - cfg.init_opacity))),
            rotation=Mlp.create([f, w, w, 4 * h], rng, final_scale=0.1, final_bias=quat_bias),
            scale=Mlp.create([f, w, w, 3 * h], rng, final_scale=0.1,
                             final_bias=inverse_softplus(cfg.init_scale)),
            color=Mlp.create([f + 3, w, w, 3 * h], rng, final_scale=0.1),
        )

    def items(self):
        return [(n, getattr(self, n)) for n in self.NAMES]


@dataclass
class Primitives:
    """Per-view renderable Gaussians, ``N*h`` rows ordered kernel-major."""

    means: np.ndarray  # (M, 3)
    quats: np.ndarray  # (M, 4) unit, (w, x, y, z)
    scales: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3) raw colour in (0, 1)
    parent: np.ndarray  # (M,) kernel index
    uncertainty: Optional[np.ndarray] = None  # (M,)
    mapped: Optional[np.ndarray] = None  # (M, 3)

    def __len__(self):
        return self.means.shape[0]


@dataclass
class DeriveCache:
    kernels: Kernels
    heads: KernelHeads
    dirs: np.ndarray
    dist: np.ndarray
    degenerate: np.ndarray
    caches: dict
    raw_quat: np.ndarray
    scale_pre: np.ndarray
    prims: Primitives = field(repr=False, default=None)


def view_direction(x_u, x_v) -> np.ndarray:
    """Unit vector from the camera centre ``x_v`` towards ``x_u``."""
    diff = np.asarray(x_u, dtype=np.float64) - np.asarray(x_v, dtype=np.float64)
    n = np.linalg.norm(diff)
    if n == 0.0:
        raise DegenerateDirectionError("kernel position coincides with camera centre")
    return diff / n


def view_directions(anchors: np.ndarray, x_v) -> tuple:
    """Batched :func:`view_direction`; coincident rows get :data:`FALLBACK_DIRECTION`.

    Returns ``(dirs, dist, degenerate)``.
    """
    diff = anchors - np.asarray(x_v, dtype=np.float64)
    dist = np.linalg.norm(diff, axis=1)
    bad = dist == 0.0
    safe = np.where(bad, 1.0, dist)
    dirs = diff / safe[:, None]
    dirs[bad] = FALLBACK_DIRECTION
    return dirs, safe, bad


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions ``(..., 4)`` in (w, x, y, z) order; normalises first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def rotmat_grad_to_quat(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Chain ``dL/dR`` back to the (unnormalised) quaternion used in :func:`quat_to_rotmat`."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = grad_r
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    du = np.stack([dw, dx, dy, dz], -1)
    # project out the radial part: d(q/|q|)/dq = (I - u u^T) / |q|
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / norm


def build_covariance(q, s) -> np.ndarray:
    """``R diag(s)^2 R^T`` for quaternion(s) ``q`` and positive scale(s) ``s``."""
    r = quat_to_rotmat(q)
    m = r * np.asarray(s, dtype=np.float64)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_backward(q, s, grad_cov):
    """Gradients of :func:`build_covariance` w.r.t. ``q`` and ``s`` given ``dL/dSigma``."""
    s = np.asarray(s, dtype=np.float64)
    r = quat_to_rotmat(q)
    m = r * s[..., None, :]
    gsym = grad_cov + np.swapaxes(grad_cov, -1, -2)
    grad_m = gsym @ m
    grad_s = np.sum(grad_m * r, axis=-2)
    grad_r = grad_m * s[..., None, :]
    return rotmat_grad_to_quat(np.asarray(q, dtype=np.float64), grad_r), grad_s


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def default_voxel_size(points: np.ndarray) -> float:
    if len(points) < 2:
        return 1.0
    dist, _ = cKDTree(points).query(points, k=2)
    med = float(np.median(dist[:, 1]))
    return 4.0 * med if med > 0 else 1.0


def init_from_points(points, cfg: SceneConfig, rng: np.random.Generator) -> Kernels:
    """One kernel per occupied voxel (at the points' centroid) plus a ring of sky kernels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot initialise kernels from an empty point list")
    vs = cfg.voxel_size or default_voxel_size(pts)
    keys = np.floor(pts / vs).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    anchors = sums / counts[:, None]
    k_u = np.full(len(anchors), vs)

    sky_anchors = np.zeros((0, 3))
    if cfg.sky_count > 0:
        centroid = pts.mean(axis=0)
        radius = float(np.max(np.linalg.norm(pts - centroid, axis=1)))
        radius = max(radius, vs) * cfg.sky_radius_mult
        sky_anchors = centroid + radius * fibonacci_sphere(cfg.sky_count)
        spacing = np.sqrt(4 * np.pi * radius**2 / cfg.sky_count)
        k_u = np.concatenate([k_u, np.full(cfg.sky_count, spacing)])

    all_anchors = np.concatenate([anchors, sky_anchors])
    n = len(all_anchors)
    h = cfg.n_offsets
    return Kernels(
        anchors=all_anchors,
        features=rng.normal(0.0, 0.1, size=(n, cfg.feature_dim)),
        log_scale=np.log(k_u),
        offsets=rng.uniform(-0.5, 0.5, size=(n, h, 3)),
        app_emb=rng.normal(0.0, 0.01, size=(n, cfg.appearance_dim)),
        unc_emb=rng.normal(0.0, 0.01, size=(n, cfg.uncertainty_dim)),
        acc_opacity=np.zeros(n),
        is_sky=np.concatenate([np.zeros(len(anchors), bool), np.ones(len(sky_anchors), bool)]),
    )


def derive_primitives(kernels: Kernels, heads: KernelHeads, x_v) -> tuple:
    """Primitives of every kernel as seen from camera centre ``x_v``.

    Returns ``(Primitives, DeriveCache)``; the heads run in eval mode (no dropout).
    """
    n, h = len(kernels), kernels.n_offsets
    k_u = kernels.scaling
    dirs, dist, bad = view_directions(kernels.anchors, x_v)
    caches = {}
    a_pre, caches["opacity"] = heads.opacity.forward(kernels.features)
    q_raw, caches["rotation"] = heads.rotation.forward(kernels.features)
    s_pre, caches["scale"] = heads.scale.forward(kernels.features)
    c_pre, caches["color"] = heads.color.forward(np.concatenate([kernels.features, dirs], 1))

    q_raw = q_raw.reshape(n * h, 4)
    qn = np.linalg.norm(q_raw, axis=1, keepdims=True)
    quats = q_raw / np.maximum(qn, 1e-12)
    s_pre = s_pre.reshape(n, h, 3)
    prims = Primitives(
        means=(kernels.anchors[:, None, :] + kernels.offsets * k_u[:, None, None]).reshape(n * h, 3),
        quats=quats,
        scales=(k_u[:, None, None] * softplus(s_pre)).reshape(n * h, 3),
        opacities=sigmoid(a_pre).reshape(n * h),
        colors=sigmoid(c_pre).reshape(n * h, 3),
        parent=np.repeat(np.arange(n), h),
    )
    cache = DeriveCache(kernels, heads, dirs, dist, bad, caches, q_raw, s_pre, prims)
    return prims, cache


def derive_backward(cache: DeriveCache, g_means, g_quats, g_scales, g_opac, g_colors, g_dirs=None):
    """Back-propagate primitive gradients into kernel arrays and head parameters.

    ``g_dirs`` (N, 3) carries extra gradient on the view directions (from the
    colour mapper). Returns ``(kernel_grads: dict, head_grads: dict)``.
    """
    kern, heads, prims = cache.kernels, cache.heads, cache.prims
    n, h = len(kern), kern.n_offsets
    k_u = kern.scaling

    g_means = g_means.reshape(n, h, 3)
    g_anchor = g_means.sum(axis=1)
    g_offsets = g_means * k_u[:, None, None]
    g_k = np.einsum("nhc,nhc->n", g_means, kern.offsets)

    sp = softplus(cache.scale_pre)
    g_scales = g_scales.reshape(n, h, 3)
    g_k += np.einsum("nhc,nhc->n", g_scales, sp)
    g_spre = (g_scales * k_u[:, None, None] * sigmoid(cache.scale_pre)).reshape(n, 3 * h)

    a = prims.opacities.reshape(n, h)
    g_apre = g_opac.reshape(n, h) * a * (1 - a)

    c = prims.colors.reshape(n, 3 * h)
    g_cpre = g_colors.reshape(n, 3 * h) * c * (1 - c)

    qn = np.maximum(np.linalg.norm(cache.raw_quat, axis=1, keepdims=True), 1e-12)
    u = prims.quats
    g_qraw = (g_quats - u * np.sum(g_quats * u, axis=1, keepdims=True)) / qn
    g_qraw = g_qraw.reshape(n, 4 * h)

    head_grads = {}
    g_feat = np.zeros_like(kern.features)
    for name, g_out in (("opacity", g_apre), ("rotation", g_qraw), ("scale", g_spre)):
        gin, head_grads[name] = getattr(heads, name).backward(cache.caches[name], g_out)
        g_feat += gin
    gin, head_grads["color"] = heads.color.backward(cache.caches["color"], g_cpre)
    fdim = kern.features.shape[1]
    g_feat += gin[:, :fdim]
    g_dir = gin[:, fdim:]
    if g_dirs is not None:
        g_dir = g_dir + g_dirs
    # d(dir)/d(anchor) = (I - d d^T) / dist; zero where the fallback direction was used
    d = cache.dirs
    g_anchor += np.where(
        cache.degenerate[:, None], 0.0,
        (g_dir - d * np.sum(g_dir * d, axis=1, keepdims=True)) / cache.dist[:, None],
    )
    kernel_grads = {
        "anchors": g_anchor,
        "features": g_feat,
        "log_scale": g_k * k_u,
        "offsets": g_offsets,
    }
    return kernel_grads, head_grads


@dataclass
class PruneReport:
    removed: np.ndarray
    kept: np.ndarray
    before: int
    after: int


def prune_kernels(kernels: Kernels, opacity_threshold: float, window_iterations: int):
    """Drop non-sky kernels whose opacity accumulated over the window is too small.

    Survivors have their accumulators reset. Returns ``(kernels, PruneReport)``.
    """
    low = kernels.acc_opacity < opacity_threshold * window_iterations
    remove = low & ~kernels.is_sky
    keep = np.flatnonzero(~remove)
    out = kernels.subset(keep)
    out.acc_opacity[:] = 0.0
    return out, PruneReport(np.flatnonzero(remove), keep, len(kernels), len(out))


def with_arrays(kernels: Kernels, **arrays) -> Kernels:
    return replace(kernels, **arrays)
