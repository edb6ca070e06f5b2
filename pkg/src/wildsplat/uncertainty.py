"""Gaussian-wise uncertainty, patch features for occlusion cues, and the border mask."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import Mlp, ShapeError

BETA_MIN = 0.1
FEATURE_MAGIC = b"NXFT"
N_ORIENT_BINS = 8


@dataclass
class UncertaintyHead:
    mlp: Mlp
    unc_dim: int
    transient_dim: int
    beta_min: float = BETA_MIN

    @classmethod
    def create(cls, unc_dim: int, transient_dim: int, n_offsets: int, rng, hidden: int = 64,
               beta_min: float = BETA_MIN) -> "UncertaintyHead":
        mlp = Mlp.create([unc_dim + transient_dim, hidden, hidden, n_offsets], rng,
                         output="softplus", final_scale=0.1)
        return cls(mlp, unc_dim, transient_dim, beta_min)


def predict_uncertainties(unc_emb, transient, head: UncertaintyHead):
    """Per-primitive uncertainties ``softplus(F_beta(eps_beta, eps_tau)) + beta_min``.

    ``unc_emb`` is ``(N, D_beta)`` (or a single vector); ``transient`` is one
    image's ``(D_tau,)`` vector. Returns ``(beta (N, h), cache)``.
    """
    unc_emb = np.asarray(unc_emb, dtype=np.float64)
    single = unc_emb.ndim == 1
    unc_emb = np.atleast_2d(unc_emb)
    transient = np.asarray(transient, dtype=np.float64)
    if unc_emb.shape[1] != head.unc_dim or transient.shape != (head.transient_dim,):
        raise ShapeError(
            f"uncertainty head expects dims {head.unc_dim}/{head.transient_dim}, "
            f"got {unc_emb.shape[1]}/{transient.shape}"
        )
    x = np.concatenate([unc_emb, np.broadcast_to(transient, (len(unc_emb), len(transient)))], 1)
    out, cache = head.mlp.forward(x)
    beta = out + head.beta_min
    return (beta[0] if single else beta), cache


def uncertainty_backward(cache, head: UncertaintyHead, grad_beta):
    """Returns ``(g_unc_emb, g_transient, mlp_grads)``."""
    g = np.atleast_2d(grad_beta)
    g_in, grads = head.mlp.backward(cache, g if not cache.squeeze else g[0])
    g_in = np.atleast_2d(g_in)
    return g_in[:, : head.unc_dim], g_in[:, head.unc_dim:].sum(axis=0), grads


@dataclass
class BoundaryParams:
    center_x: float
    center_y: float
    var_x: float
    var_y: float
    m_min: float = 0.05

    def __post_init__(self):
        if self.var_x <= 0 or self.var_y <= 0:
            raise ValueError("boundary variances must be positive")
        if not 0.0 < self.m_min <= 1.0:
            raise ValueError("m_min must lie in (0, 1]")

    @classmethod
    def default(cls, width: int, height: int, m_min: float = 0.05) -> "BoundaryParams":
        return cls(width / 2, height / 2, (width / 3) ** 2, (height / 3) ** 2, m_min)


def boundary_penalty(width: int, height: int, params: BoundaryParams) -> np.ndarray:
    """Centred Gaussian mask ``(H, W)`` clamped from below at ``m_min``."""
    x = np.arange(width, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    ex = (x - params.center_x) ** 2 / (2 * params.var_x)
    ey = (y - params.center_y) ** 2 / (2 * params.var_y)
    return np.maximum(params.m_min, np.exp(-ey[:, None] - ex[None, :]))


@dataclass
class FeatureMap:
    features: np.ndarray  # (rows, cols, L)
    patch: int

    @property
    def grid(self):
        return self.features.shape[:2]

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1]


def luminance(image):
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def orientation_bins(gx, gy):
    """Bin index (centred on multiples of 45 degrees; +x -> 0, +y -> 2)."""
    theta = np.arctan2(gy, gx)
    return np.mod(np.rint(theta / (2 * np.pi / N_ORIENT_BINS)).astype(np.int64), N_ORIENT_BINS)


def _patch_mean(values, patch, rows, cols):
    """Mean of ``values (H, W, K)`` over each patch (border patches may be partial)."""
    h, w = values.shape[:2]
    pad = np.zeros((rows * patch, cols * patch) + values.shape[2:])
    cnt = np.zeros((rows * patch, cols * patch))
    pad[:h, :w] = values
    cnt[:h, :w] = 1.0
    s = pad.reshape(rows, patch, cols, patch, -1).sum(axis=(1, 3))
    n = cnt.reshape(rows, patch, cols, patch).sum(axis=(1, 3))
    return s / n[..., None]


def builtin_features(image, patch: int = 16) -> FeatureMap:
    """Per patch: mean RGB, RGB std, and a magnitude-weighted 8-bin luminance orientation histogram."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    rows, cols = -(-h // patch), -(-w // patch)
    mean = _patch_mean(img, patch, rows, cols)
    sq = _patch_mean(img * img, patch, rows, cols)
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    gy, gx = np.gradient(luminance(img)) if min(h, w) > 1 else (np.zeros((h, w)),) * 2
    mag = np.hypot(gx, gy)
    bins = orientation_bins(gx, gy)
    onehot = np.zeros((h, w, N_ORIENT_BINS))
    np.put_along_axis(onehot, bins[..., None], mag[..., None], axis=2)
    hist = _patch_mean(onehot, patch, rows, cols)
    return FeatureMap(np.concatenate([mean, std, hist], axis=2), patch)


def write_feature_file(path, fmap: FeatureMap) -> None:
    rows, cols, length = fmap.features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", rows, cols, length))
        fh.write(np.ascontiguousarray(fmap.features, dtype="<f4").tobytes())


def read_feature_file(path, patch: int = 16) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not an NXFT feature file")
    rows, cols, length = struct.unpack("<III", data[4:16])
    need = rows * cols * length * 4
    if len(data) - 16 != need:
        raise ValueError(f"{path}: expected {need} payload bytes, found {len(data) - 16}")
    feats = np.frombuffer(data[16:], dtype="<f4").reshape(rows, cols, length).astype(np.float64)
    return FeatureMap(feats, patch)


def extract_features(image, extractor: str = "builtin", patch: int = 16,
                     path: Optional[str] = None) -> FeatureMap:
    """Patch features from the built-in descriptor or an external NXFT file."""
    img = np.asarray(image, dtype=np.float64)
    if extractor == "builtin":
        return builtin_features(img, patch)
    if extractor != "external":
        raise ValueError(f"unknown feature extractor {extractor!r}")
    if path is None:
        raise ValueError("external features need a file path")
    fmap = read_feature_file(path, patch)
    h, w = img.shape[:2]
    if fmap.grid != (-(-h // patch), -(-w // patch)):
        raise ValueError(f"{path}: grid {fmap.grid} does not match a {h}x{w} image at patch {patch}")
    return fmap


@dataclass
class Dissimilarity:
    per_patch: np.ndarray  # (rows, cols) in [0, 2]
    pixel_map: np.ndarray  # (H, W)
    similarity: float  # sum of per-patch cosines


def feature_dissimilarity(rendered: FeatureMap, reference: FeatureMap,
                          height: Optional[int] = None, width: Optional[int] = None) -> Dissimilarity:
    """``1 - cos`` per patch (0 for zero vectors), broadcast to pixels."""
    if rendered.features.shape != reference.features.shape or rendered.patch != reference.patch:
        raise ValueError("feature maps come from different grids or extractors")
    a, b = rendered.features, reference.features
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    zero = (na == 0) | (nb == 0)
    cos = np.where(zero, 1.0, np.sum(a * b, axis=2) / np.where(zero, 1.0, na * nb))
    cos = np.clip(cos, -1.0, 1.0)
    d = 1.0 - cos
    rows, cols = rendered.grid
    p = rendered.patch
    height = rows * p if height is None else height
    width = cols * p if width is None else width
    pix = np.repeat(np.repeat(d, p, axis=0), p, axis=1)[:height, :width]
    return Dissimilarity(d, pix, float(np.sum(cos)))
