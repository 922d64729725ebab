"""Training objectives and image quality metrics.

All functions take channel-first ``[C,H,W]`` tensors (or arrays) and return
scalar tensors, so the same code serves as a differentiable loss and as an
evaluation metric (via ``.item()``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor, as_tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MSE_FLOOR = 1e-12


@dataclass
class LossConfig:
    eps_char: float = 1e-3
    lambda_freq: float = 0.1
    w_ssim: float = 0.4
    w_cltcc: float = 0.5
    w_maae: float = 0.5
    psnr_cap_db: float = 120.0
    # False keeps L_GT out of the optimized objective (monitoring only)
    gt_in_total: bool = True

    def __post_init__(self):
        if self.eps_char <= 0:
            raise ValueError("eps_char must be positive")
        for name in ("lambda_freq", "w_ssim", "w_cltcc", "w_maae"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.psnr_cap_db <= 0:
            raise ValueError("psnr_cap_db must be positive")


def _pair(o, t) -> tuple[Tensor, Tensor]:
    o = as_tensor(o)
    t = as_tensor(t, like=o)
    if o.shape != t.shape:
        raise ShapeError(f"shape mismatch: {o.shape} vs {t.shape}")
    return o, t


def charbonnier(o, t, eps: float = 1e-3) -> Tensor:
    """Mean of ``sqrt((o - t)^2 + eps^2)`` over all elements."""
    o, t = _pair(o, t)
    d = o - t
    return ops.mean(ops.sqrt(d * d + eps * eps))


def frequency_loss(o, t) -> Tensor:
    """Mean absolute difference of real and imaginary 2D spectra, per channel, averaged."""
    o, t = _pair(o, t)
    re, im = ops.fft2d(o - t)
    return ops.mean(ops.abs(re) + ops.abs(im))


def maae_loss(outs: list[list[Tensor]], target, cfg: LossConfig | None = None) -> Tensor:
    """Sum over stages and scales of Charbonnier plus weighted frequency loss.

    Targets for coarser scales are bilinear downsamplings of ``target``.
    """
    cfg = cfg or LossConfig()
    if not outs or not outs[0]:
        raise ValueError("maae_loss needs at least one stage output")
    first = as_tensor(outs[0][0])
    target = as_tensor(target, like=first)
    _, h, w = target.shape
    pyramid = {}
    total = None
    for row in outs:
        for n, o in enumerate(row):
            expect = (target.shape[0], h // 2 ** n, w // 2 ** n)
            if o.shape != expect:
                raise ShapeError(f"output at scale {n + 1} has shape {o.shape}, expected {expect}")
            if n not in pyramid:
                pyramid[n] = ops.bilinear_resize(target, expect[1], expect[2])
            tn = pyramid[n]
            term = charbonnier(o, tn, cfg.eps_char) + cfg.lambda_freq * frequency_loss(o, tn)
            total = term if total is None else total + term
    return total


def psnr(o, t, cap_db: float = 120.0) -> Tensor:
    """``10 log10(1 / MSE)`` for images in [0, 1], with the MSE floored and the result capped."""
    o, t = _pair(o, t)
    d = o - t
    mse = ops.clip(ops.mean(d * d), lo=MSE_FLOOR)
    db = ops.log(mse) * (-10.0 / math.log(10.0))
    if float(mse.data) <= MSE_FLOOR:
        # at the floor the gradient is already zero; return the cap exactly
        return ops.clip(db, hi=cap_db) * 0.0 + cap_db
    return ops.clip(db, hi=cap_db)


@lru_cache(maxsize=32)
def _gaussian_valid_matrix(n: int) -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + SSIM_WINDOW] = g
    return m


def gaussian_window() -> np.ndarray:
    """The normalized 2D SSIM window (outer product of the 1D Gaussian)."""
    g = _gaussian_valid_matrix(SSIM_WINDOW)[0]
    return np.outer(g, g)


def _filter(x: Tensor, rows: Tensor, cols_t: Tensor) -> Tensor:
    return ops.matmul(ops.matmul(rows, x), cols_t)


def ssim(o, t, data_range: float = 1.0) -> Tensor:
    """Mean SSIM over an 11x11 Gaussian window (sigma 1.5), valid positions only."""
    o, t = _pair(o, t)
    h, w = o.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    rows = Tensor(_gaussian_valid_matrix(h).astype(o.dtype))
    cols_t = Tensor(_gaussian_valid_matrix(w).T.astype(o.dtype))
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x = _filter(o, rows, cols_t)
    mu_y = _filter(t, rows, cols_t)
    e_xx = _filter(o * o, rows, cols_t)
    e_yy = _filter(t * t, rows, cols_t)
    e_xy = _filter(o * t, rows, cols_t)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    num = (2.0 * mu_xy + c1) * (2.0 * (e_xy - mu_xy) + c2)
    den = (mu_xx + mu_yy + c1) * ((e_xx - mu_xx) + (e_yy - mu_yy) + c2)
    return ops.mean(num / den)


@dataclass
class LossTerms:
    total: Tensor
    gt: Tensor
    cltcc: Tensor
    maae: Tensor
    psnr: Tensor
    ssim: Tensor


def loss_terms(o_final, target, outs: list[list[Tensor]] | None, lut_loss,
               cfg: LossConfig | None = None) -> LossTerms:
    """Evaluate every objective term and compose the training loss.

    ``L_GT = -PSNR/cap + w_ssim (1 - SSIM)`` and
    ``L_total = L_GT + w_cltcc L_CLTCC + w_maae L_MAAE``.
    """
    cfg = cfg or LossConfig()
    o, t = _pair(o_final, target)
    p = psnr(o, t, cfg.psnr_cap_db)
    s = ssim(o, t)
    gt = gt_loss(p, s, cfg)
    zero = Tensor(np.zeros((), dtype=o.dtype))
    l_cltcc = as_tensor(lut_loss, like=o) if lut_loss is not None else zero
    l_maae = maae_loss(outs, t, cfg) if outs else zero
    total = compose_total(gt, l_cltcc, l_maae, cfg)
    return LossTerms(total=total, gt=gt, cltcc=l_cltcc, maae=l_maae, psnr=p, ssim=s)


def gt_loss(p: Tensor, s: Tensor, cfg: LossConfig) -> Tensor:
    return p * (-1.0 / cfg.psnr_cap_db) + cfg.w_ssim * (1.0 - s)


def compose_total(gt: Tensor, l_cltcc: Tensor, l_maae: Tensor, cfg: LossConfig) -> Tensor:
    total = cfg.w_cltcc * l_cltcc + cfg.w_maae * l_maae
    return gt + total if cfg.gt_in_total else total


def composite_losses(o_final, target, outs, lut_loss, cfg: LossConfig | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(L_GT, L_total)``."""
    terms = loss_terms(o_final, target, outs, lut_loss, cfg)
    return terms.gt, terms.total
