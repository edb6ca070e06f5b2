"""Scalar objectives and their exact gradients.

SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at every position
where the window fits entirely inside the image, averaged over positions and
channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WINDOW = 11
WINDOW_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


_G = gaussian_window()


def _filter_valid(x):
    """Separable Gaussian filter over the first two axes, 'valid' extent."""
    x = sliding_window_view(x, WINDOW, axis=0) @ _G
    return sliding_window_view(x, WINDOW, axis=1) @ _G


def _filter_full(x):
    """Adjoint of :func:`_filter_valid` (zero-padded 'full' extent)."""
    pad = WINDOW - 1
    x = np.pad(x, ((pad, pad), (pad, pad)) + ((0, 0),) * (x.ndim - 2))
    return _filter_valid(x)


def _as3(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")


def ssim(a, b) -> float:
    return ssim_with_grad(a, b, need_grad=False)[0]


def ssim_with_grad(a, b, need_grad: bool = True):
    """Return ``(ssim, dssim_value/da or None)``; the gradient is of SSIM w.r.t. ``a``."""
    a, b = _as3(a), _as3(b)
    _check(a, b)
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    e_aa, e_bb, e_ab = _filter_valid(a * a), _filter_valid(b * b), _filter_valid(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * cov + C2
    den1 = mu_a**2 + mu_b**2 + C1
    den2 = var_a + var_b + C2
    s_map = num1 * num2 / (den1 * den2)
    value = float(s_map.mean())
    if not need_grad:
        return value, None
    n = s_map.size
    # partials of each window's SSIM w.r.t. mu_a, var_a, cov
    d_mu = (2 * mu_b * num2 / (den1 * den2) - s_map * 2 * mu_a / den1) / n
    d_var = -s_map / den2 / n
    d_cov = 2 * num1 / (den1 * den2) / n
    # var_a = E[a^2] - mu_a^2, cov = E[ab] - mu_a mu_b
    g_mu = d_mu - 2 * mu_a * d_var - mu_b * d_cov
    grad = _filter_full(g_mu) + 2 * a * _filter_full(d_var) + b * _filter_full(d_cov)
    return value, grad


def dssim(a, b) -> float:
    return (1.0 - ssim(a, b)) / 2.0


def dssim_with_grad(a, b):
    s, g = ssim_with_grad(a, b)
    return (1.0 - s) / 2.0, -0.5 * g


def l1_with_grad(a, b):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def color_loss(raw, mapped, reference, lam: float = 0.2) -> float:
    """``lam * DSSIM(raw, ref) + (1 - lam) * mean|mapped - ref|``."""
    raw, mapped, reference = _as3(raw), _as3(mapped), _as3(reference)
    if mapped.shape != reference.shape:
        raise ValueError(f"image shapes differ: {mapped.shape} vs {reference.shape}")
    return lam * dssim(raw, reference) + (1 - lam) * float(np.abs(mapped - reference).mean())


def uncertainty_loss(dis, beta, lam1: float = 0.5, beta_min: float = 0.0):
    """Mean of ``d / (2 beta^2) + lam1 log beta``; returns ``(value, d value/d beta)``.

    ``dis`` is treated as a constant.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < beta_min * (1 - 1e-12)) or np.any(beta <= 0):
        raise ValueError(f"uncertainty below floor {beta_min}")
    dis = np.broadcast_to(np.asarray(dis, dtype=np.float64), beta.shape)
    n = beta.size
    value = float(np.mean(dis / (2 * beta**2) + lam1 * np.log(beta)))
    grad = (-dis / beta**3 + lam1 / beta) / n
    return value, grad


def reg_loss(scales):
    """Sum over primitives of the product of their three scales; returns ``(value, grad)``."""
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    if s.size == 0:
        return 0.0, s.copy()
    grad = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], 1)
    return float(np.prod(s, axis=1).sum()), grad


@dataclass
class LossConfig:
    lam: float = 0.2
    lam1: float = 0.5
    lam_reg: float = 0.01
    beta_min: float = 0.1
    m_min: float = 0.05
    enable_mapping: bool = True
    enable_uncertainty: bool = True
    enable_boundary: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.lam1 < 0 or self.lam_reg < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    total: float
    color: float
    dssim: float
    l1: float
    uncertainty: float
    reg: float

    def recompose(self) -> float:
        return self.color + self.uncertainty + self.reg

    def as_dict(self) -> dict:
        return {"total": self.total, "color": self.color, "dssim": self.dssim, "l1": self.l1,
                "uncert": self.uncertainty, "reg": self.reg}


@dataclass
class LossGrads:
    raw: np.ndarray
    mapped: np.ndarray
    beta: np.ndarray
    scales: np.ndarray


def total_loss(raw, mapped, reference, beta, dis, mask, scales, cfg: LossConfig):
    """Composite objective ``L_color/(2 beta^2 M) + L_u + lam_reg L_reg``.

    The per-pixel weight ``1/(2 beta^2 M)`` is a constant for the colour term;
    the DSSIM scalar is scaled by the mean weight and the L1 residual by the
    per-pixel weight. With uncertainty disabled the weight is 1 and ``L_u`` is
    dropped. Returns ``(LossBreakdown, LossGrads)``.
    """
    raw, mapped, reference = _as3(raw), _as3(mapped), _as3(reference)
    if not cfg.enable_mapping:
        mapped = raw
    if raw.shape != reference.shape or mapped.shape != reference.shape:
        raise ValueError("rendered and reference images differ in shape")
    h, w, ch = reference.shape
    if cfg.enable_uncertainty:
        beta = np.asarray(beta, dtype=np.float64)
        m = np.ones((h, w)) if mask is None else np.asarray(mask, dtype=np.float64)
        if beta.shape != (h, w) or m.shape != (h, w):
            raise ValueError("uncertainty or mask map does not match the image")
        weight = 1.0 / (2.0 * beta**2 * m)
    else:
        weight = np.ones((h, w))

    ds, g_ds = dssim_with_grad(raw, reference)
    mean_w = float(weight.mean())
    dssim_term = cfg.lam * ds * mean_w
    g_raw = cfg.lam * mean_w * g_ds

    diff = mapped - reference
    l1_term = (1 - cfg.lam) * float(np.mean(weight[..., None] * np.abs(diff)))
    g_l1 = (1 - cfg.lam) * weight[..., None] * np.sign(diff) / diff.size
    if cfg.enable_mapping:
        g_mapped = g_l1
    else:
        g_raw = g_raw + g_l1
        g_mapped = np.zeros_like(g_l1)

    if cfg.enable_uncertainty:
        u_val, g_beta = uncertainty_loss(dis, beta, cfg.lam1)
    else:
        u_val, g_beta = 0.0, np.zeros((h, w))
    r_val, g_s = reg_loss(scales)
    color = dssim_term + l1_term
    reg = cfg.lam_reg * r_val
    br = LossBreakdown(color + u_val + reg, color, dssim_term, l1_term, u_val, reg)
    return br, LossGrads(g_raw, g_mapped, g_beta, cfg.lam_reg * g_s)
