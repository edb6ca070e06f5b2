"""EWA projection and tile-based front-to-back alpha blending.

Splats are blended strictly by increasing depth (ties by source index). Each
splat's footprint is the ellipse where the Mahalanobis distance is at most 3;
inside it the Gaussian is shifted down by ``exp(-4.5)`` and renormalised, so
the footprint edge is continuous and the centre still evaluates to 1. The
tiled renderer visits, per pixel, exactly the splats an untiled loop would,
in the same order, so tiling never changes the result.

The backward pass writes per-(tile, splat) partial gradients into a flat
buffer and reduces them in a fixed sequential order; repeated runs are
bit-identical regardless of the thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from numba import njit, prange

from .scene import Camera, build_covariance, covariance_backward

LOW_PASS = 0.3
NEAR_PLANE = 0.01
SIGMA_CLAMP = 0.99
T_EPS = 1e-4
CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)
_E_CUT = math.exp(-0.5 * CUTOFF)
_INV = 1.0 / (1.0 - _E_CUT)


def set_threads(n: Optional[int]) -> None:
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def footprint(q):
    """Truncated Gaussian falloff as a function of squared Mahalanobis distance."""
    q = np.asarray(q, dtype=np.float64)
    return np.where(q <= CUTOFF, (np.exp(-0.5 * q) - _E_CUT) * _INV, 0.0)


@dataclass
class Splats:
    means2d: np.ndarray  # (M, 2) pixel coordinates, pixel centres at integers
    cov2d: np.ndarray  # (M, 3) entries (xx, xy, yy), low-pass included
    depth: np.ndarray  # (M,)
    opacity: np.ndarray  # (M,)
    payload: np.ndarray  # (M, C)
    index: np.ndarray  # (M,) source primitive index

    def __len__(self):
        return self.means2d.shape[0]

    @property
    def conic(self) -> np.ndarray:
        a, b, c = self.cov2d.T
        det = a * c - b * b
        return np.stack([c / det, -b / det, a / det], 1)

    @property
    def extent(self) -> np.ndarray:
        return 3.0 * np.sqrt(self.cov2d[:, [0, 2]])

    def take(self, idx) -> "Splats":
        return Splats(self.means2d[idx], self.cov2d[idx], self.depth[idx],
                      self.opacity[idx], self.payload[idx], self.index[idx])


@dataclass
class Projection:
    """Geometry of the primitives that survived culling."""

    valid: np.ndarray  # (K,) indices into the primitive arrays
    means2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray


def project(means, cov3d, camera: Camera) -> Projection:
    """Perspective-project means and push covariances through the affine EWA Jacobian.

    Primitives at or before the near plane, or whose 3-sigma box misses the
    image, are culled.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    w = camera.rotation
    t = means @ w.T + camera.translation
    z = t[:, 2]
    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)
    u = camera.fx * t[:, 0] / zs + camera.cx
    v = camera.fy * t[:, 1] / zs + camera.cy
    jac = _jacobian(t, zs, camera)
    tm = jac @ w
    cov = tm @ cov3d @ np.swapaxes(tm, 1, 2)
    a = cov[:, 0, 0] + LOW_PASS
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1] + LOW_PASS
    rx, ry = 3.0 * np.sqrt(np.maximum(a, 0)), 3.0 * np.sqrt(np.maximum(c, 0))
    inside = (
        (u + rx >= 0) & (u - rx <= camera.width - 1)
        & (v + ry >= 0) & (v - ry <= camera.height - 1)
    )
    ok = front & inside & (a * c - b * b > 0)
    valid = np.flatnonzero(ok)
    return Projection(
        valid,
        np.stack([u[valid], v[valid]], 1),
        np.stack([a[valid], b[valid], c[valid]], 1),
        z[valid],
    )


def _jacobian(t, z, camera):
    n = t.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * t[:, 0] / (z * z)
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * t[:, 1] / (z * z)
    return jac


def project_ewa(mean, quat, scale, camera: Camera):
    """Single-primitive projection; returns ``(mean2d, cov2d 2x2, depth)`` or ``None`` if culled."""
    cov3d = build_covariance(np.asarray(quat)[None], np.asarray(scale)[None])
    p = project(np.asarray(mean)[None], cov3d, camera)
    if len(p.valid) == 0:
        return None
    a, b, c = p.cov2d[0]
    return p.means2d[0], np.array([[a, b], [b, c]]), float(p.depth[0])


def make_splats(proj: Projection, opacity, payload) -> Splats:
    return Splats(proj.means2d, proj.cov2d, proj.depth,
                  np.asarray(opacity, dtype=np.float64)[proj.valid],
                  np.asarray(payload, dtype=np.float64)[proj.valid], proj.valid.copy())


@dataclass
class Raster:
    image: np.ndarray  # (H, W, C) including background
    alpha: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W)
    final_t: np.ndarray  # (H, W)
    last: np.ndarray  # (H, W) last contributing entry in the tile list, -1 if none
    tile_ptr: np.ndarray
    tile_ids: np.ndarray
    order: np.ndarray  # depth order of the splats
    tile_size: int
    background: np.ndarray
    splats: Splats


def depth_order(splats: Splats) -> np.ndarray:
    return np.lexsort((splats.index, splats.depth))


def rasterize(splats: Splats, width: int, height: int, tile_size: int = 16,
              background=None) -> Raster:
    """Blend every payload channel front to back; residual transmittance shows ``background``."""
    if width <= 0 or height <= 0:
        raise ValueError("zero-area image")
    n_ch = splats.payload.shape[1] if splats.payload.ndim == 2 else 0
    bg = np.zeros(n_ch) if background is None else np.asarray(background, dtype=np.float64)
    if bg.shape != (n_ch,):
        raise ValueError(f"background has {bg.shape} entries, payload has {n_ch} channels")
    order = depth_order(splats)
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    mx = np.ascontiguousarray(splats.means2d[:, 0])
    my = np.ascontiguousarray(splats.means2d[:, 1])
    ext = splats.extent
    ptr, ids = _bin(mx, my, np.ascontiguousarray(ext[:, 0]), np.ascontiguousarray(ext[:, 1]),
                    order.astype(np.int64), width, height, tile_size, tiles_x, tiles_y)
    conic = np.ascontiguousarray(splats.conic)
    image = np.zeros((height, width, n_ch))
    final_t = np.ones((height, width))
    last = np.full((height, width), -1, dtype=np.int64)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    _forward(ptr, ids, mx, my, conic, np.ascontiguousarray(splats.opacity),
             np.ascontiguousarray(splats.payload), bg, width, height, tile_size, tiles_x,
             image, final_t, last, n_contrib)
    return Raster(image, 1.0 - final_t, n_contrib, final_t, last, ptr, ids, order,
                  tile_size, bg, splats)


@dataclass
class SplatGrads:
    means2d: np.ndarray
    cov2d: np.ndarray  # (M, 2, 2) symmetric dL/dCov
    opacity: np.ndarray
    payload: np.ndarray


def rasterize_backward(raster: Raster, grad_image, geometry_channels=None) -> SplatGrads:
    """Exact gradients of the blend for the realised ordering and footprint.

    ``geometry_channels`` (bool per channel, default all) selects which
    channels' gradients reach means, covariances and opacities; payload
    gradients are always returned for every channel.
    """
    s = raster.splats
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != raster.image.shape:
        raise ValueError(f"gradient image {grad_image.shape} != render {raster.image.shape}")
    m, n_ch = len(s), raster.image.shape[2]
    height, width = raster.alpha.shape
    tiles_x = -(-width // raster.tile_size)
    conic = np.ascontiguousarray(s.conic)
    geo = np.ones(n_ch) if geometry_channels is None else np.asarray(geometry_channels, dtype=np.float64)
    buf = np.zeros((len(raster.tile_ids), 6 + n_ch))
    _backward(raster.tile_ptr, raster.tile_ids, np.ascontiguousarray(s.means2d[:, 0]),
              np.ascontiguousarray(s.means2d[:, 1]), conic, np.ascontiguousarray(s.opacity),
              np.ascontiguousarray(s.payload), raster.background, width, height,
              raster.tile_size, tiles_x, grad_image, geo, raster.final_t, raster.last, buf)
    acc = np.zeros((m, 6 + n_ch))
    _reduce(raster.tile_ids, buf, acc)
    # conic (a, b, c) with q = a dx^2 + 2 b dx dy + c dy^2  ->  dL/dCov = -K gK K
    gk = np.empty((m, 2, 2))
    gk[:, 0, 0] = acc[:, 2]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * acc[:, 3]
    gk[:, 1, 1] = acc[:, 4]
    k = np.empty((m, 2, 2))
    k[:, 0, 0], k[:, 0, 1], k[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 2]
    k[:, 1, 0] = conic[:, 1]
    gcov = -k @ gk @ k
    return SplatGrads(acc[:, 0:2].copy(), gcov, acc[:, 5].copy(), acc[:, 6:].copy())


def project_gradients(grads: SplatGrads, proj: Projection, means, quats, scales,
                      camera: Camera, n_prims: int):
    """Chain splat gradients through EWA and the covariance into (mean, quat, scale).

    Returns full-length arrays (zeros for culled primitives).
    """
    valid = proj.valid
    mu = np.asarray(means, dtype=np.float64)[valid]
    q = np.asarray(quats, dtype=np.float64)[valid]
    sc = np.asarray(scales, dtype=np.float64)[valid]
    w = camera.rotation
    t = mu @ w.T + camera.translation
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    jac = _jacobian(t, z, camera)
    tm = jac @ w
    cov3d = build_covariance(q, sc)
    g = grads.cov2d
    g_cov3d = np.swapaxes(tm, 1, 2) @ g @ tm
    g_tm = 2.0 * g @ tm @ cov3d
    g_j = g_tm @ w.T
    z2, z3 = z * z, z * z * z
    gu, gv = grads.means2d[:, 0], grads.means2d[:, 1]
    g_t = np.empty_like(t)
    g_t[:, 0] = gu * fx / z + g_j[:, 0, 2] * (-fx / z2)
    g_t[:, 1] = gv * fy / z + g_j[:, 1, 2] * (-fy / z2)
    g_t[:, 2] = (
        -gu * fx * x / z2 - gv * fy * y / z2
        + g_j[:, 0, 0] * (-fx / z2) + g_j[:, 0, 2] * (2 * fx * x / z3)
        + g_j[:, 1, 1] * (-fy / z2) + g_j[:, 1, 2] * (2 * fy * y / z3)
    )
    g_q, g_s = covariance_backward(q, sc, g_cov3d)
    out_mu = np.zeros((n_prims, 3))
    out_q = np.zeros((n_prims, 4))
    out_s = np.zeros((n_prims, 3))
    out_mu[valid] = g_t @ w
    out_q[valid] = g_q
    out_s[valid] = g_s
    return out_mu, out_q, out_s


@njit(cache=True)
def _tile_range(mx, my, rx, ry, width, height, tile):
    x0 = max(0, int(math.ceil(mx - rx)))
    x1 = min(width - 1, int(math.floor(mx + rx)))
    y0 = max(0, int(math.ceil(my - ry)))
    y1 = min(height - 1, int(math.floor(my + ry)))
    if x0 > x1 or y0 > y1:
        return 0, -1, 0, -1
    return x0 // tile, x1 // tile, y0 // tile, y1 // tile


@njit(cache=True)
def _bin(mx, my, rx, ry, order, width, height, tile, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in order:
        tx0, tx1, ty0, ty1 = _tile_range(mx[k], my[k], rx[k], ry[k], width, height, tile)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    ids = np.empty(ptr[-1], dtype=np.int64)
    for k in order:
        tx0, tx1, ty0, ty1 = _tile_range(mx[k], my[k], rx[k], ry[k], width, height, tile)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = k
                fill[t] += 1
    return ptr, ids


@njit(parallel=True, cache=True)
def _forward(ptr, ids, mx, my, conic, opac, payload, bg, width, height, tile, tiles_x,
             image, final_t, last, n_contrib):
    n_tiles = ptr.shape[0] - 1
    n_ch = payload.shape[1]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start, end = ptr[t], ptr[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                trans = 1.0
                cnt = 0
                lastk = -1
                for e in range(start, end):
                    k = ids[e]
                    dx = px - mx[k]
                    dy = py - my[k]
                    q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                    if q > CUTOFF:
                        continue
                    s = opac[k] * (math.exp(-0.5 * q) - _E_CUT) * _INV
                    if s > SIGMA_CLAMP:
                        s = SIGMA_CLAMP
                    if s <= 0.0:
                        continue
                    wgt = s * trans
                    for c in range(n_ch):
                        image[py, px, c] += payload[k, c] * wgt
                    trans *= 1.0 - s
                    cnt += 1
                    lastk = e
                    if trans < T_EPS:
                        break
                for c in range(n_ch):
                    image[py, px, c] += trans * bg[c]
                final_t[py, px] = trans
                last[py, px] = lastk
                n_contrib[py, px] = cnt


@njit(parallel=True, cache=True)
def _backward(ptr, ids, mx, my, conic, opac, payload, bg, width, height, tile, tiles_x,
              grad_image, geo, final_t, last, buf):
    n_tiles = ptr.shape[0] - 1
    n_ch = payload.shape[1]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ptr[t]
        acc = np.empty(n_ch)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                lastk = last[py, px]
                if lastk < 0:
                    continue
                trans = final_t[py, px]
                for c in range(n_ch):
                    acc[c] = trans * bg[c]
                for e in range(lastk, start - 1, -1):
                    k = ids[e]
                    dx = px - mx[k]
                    dy = py - my[k]
                    a, b, cc = conic[k, 0], conic[k, 1], conic[k, 2]
                    q = a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy
                    if q > CUTOFF:
                        continue
                    ex = math.exp(-0.5 * q)
                    gval = (ex - _E_CUT) * _INV
                    s_raw = opac[k] * gval
                    s = s_raw if s_raw < SIGMA_CLAMP else SIGMA_CLAMP
                    if s <= 0.0:
                        continue
                    trans = trans / (1.0 - s)
                    wgt = s * trans
                    dl_ds = 0.0
                    for c in range(n_ch):
                        gc = grad_image[py, px, c]
                        dl_ds += geo[c] * gc * (payload[k, c] * trans - acc[c] / (1.0 - s))
                        buf[e, 6 + c] += gc * wgt
                        acc[c] += payload[k, c] * wgt
                    if s_raw >= SIGMA_CLAMP:
                        continue
                    buf[e, 5] += dl_ds * gval
                    dl_dq = dl_ds * opac[k] * (-0.5 * ex * _INV)
                    buf[e, 0] += dl_dq * (-2.0 * (a * dx + b * dy))
                    buf[e, 1] += dl_dq * (-2.0 * (b * dx + cc * dy))
                    buf[e, 2] += dl_dq * dx * dx
                    buf[e, 3] += dl_dq * 2.0 * dx * dy
                    buf[e, 4] += dl_dq * dy * dy


@njit(cache=True)
def _reduce(ids, buf, acc):
    for e in range(ids.shape[0]):
        k = ids[e]
        for j in range(buf.shape[1]):
            acc[k, j] += buf[e, j]
