"""Training losses: L1, MS-SSIM, and the lambda-weighted combination.

MS-SSIM follows the standard multi-scale construction: Gaussian-window
(11x11, sigma 1.5) local statistics, contrast-structure terms at the
coarser scales, full SSIM at the last scale, combined as a product with
the canonical exponent weights. When the image is too small for all five
scales, the leading weights are kept and renormalized to sum to 1.

The per-scale contrast-structure and luminance values are spatial means
of the local maps, taken per (batch, channel); the final score averages
over batch and channels. The loss term is 1 - MS-SSIM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import GradTape, Tensor

CANONICAL_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MsSsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    scale_weights: tuple = CANONICAL_WEIGHTS
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def usable_scales(self, h: int, w: int) -> int:
        s = 0
        m = min(h, w)
        while s < len(self.scale_weights) and m // (2 ** s) >= self.window_size:
            # downsampling halves the grid s-1 times; both dims must stay even
            if s > 0 and (h % (2 ** s) or w % (2 ** s)):
                break
            s += 1
        if s == 0:
            raise T.GeometryError(
                f"image {h}x{w} smaller than SSIM window {self.window_size}")
        return s

    def weights_for(self, scales: int):
        w = np.asarray(self.scale_weights[:scales], dtype=np.float64)
        return w / w.sum()


def gaussian_window(size: int, sigma: float, dtype=np.float64):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(dtype)


def _gauss_filter(x: Tensor, kernel: Tensor, tape) -> Tensor:
    """Depthwise valid-padding Gaussian blur: channels folded into the
    batch so a single-channel conv applies to each independently."""
    n, c, h, w = x.shape
    folded = T.reshape(x, (n * c, 1, h, w), tape)
    blurred = T.conv2d(folded, kernel, _zero_bias(kernel), 1, 0, tape)
    _, _, ho, wo = blurred.shape
    return T.reshape(blurred, (n, c, ho, wo), tape)


_BIAS_CACHE = {}


def _zero_bias(kernel):
    key = kernel.dtype
    if key not in _BIAS_CACHE:
        _BIAS_CACHE[key] = Tensor(np.zeros(1, dtype=kernel.dtype))
    return _BIAS_CACHE[key]


def l1_loss(y: Tensor, gt: Tensor, tape: GradTape | None = None) -> Tensor:
    if y.shape != gt.shape:
        raise T.ShapeError(f"l1_loss: shapes {y.shape} vs {gt.shape}")
    return T.mean_all(T.absolute(T.sub(y, gt, tape), tape), tape)


def _ssim_terms(a: Tensor, b: Tensor, kernel: Tensor, cfg: MsSsimConfig, tape):
    """Per-(batch,channel) spatial means of the luminance and
    contrast-structure maps, each shaped [n, c, 1, 1]."""
    mu_a = _gauss_filter(a, kernel, tape)
    mu_b = _gauss_filter(b, kernel, tape)
    mu_aa = T.mul(mu_a, mu_a, tape)
    mu_bb = T.mul(mu_b, mu_b, tape)
    mu_ab = T.mul(mu_a, mu_b, tape)
    var_a = T.sub(_gauss_filter(T.mul(a, a, tape), kernel, tape), mu_aa, tape)
    var_b = T.sub(_gauss_filter(T.mul(b, b, tape), kernel, tape), mu_bb, tape)
    cov = T.sub(_gauss_filter(T.mul(a, b, tape), kernel, tape), mu_ab, tape)

    lum_num = T.add_scalar(T.scale(mu_ab, 2.0, tape), cfg.c1, tape)
    lum_den = T.add_scalar(T.add(mu_aa, mu_bb, tape), cfg.c1, tape)
    lum = T.div(lum_num, lum_den, tape)

    cs_num = T.add_scalar(T.scale(cov, 2.0, tape), cfg.c2, tape)
    cs_den = T.add_scalar(T.add(var_a, var_b, tape), cfg.c2, tape)
    cs = T.div(cs_num, cs_den, tape)

    return T.global_avg_pool(lum, tape), T.global_avg_pool(cs, tape)


def _clamp_min(x: Tensor, floor: float, tape) -> Tensor:
    shifted = T.relu(T.add_scalar(x, -floor, tape), tape)
    return T.add_scalar(shifted, floor, tape)


def ms_ssim(y: Tensor, gt: Tensor, cfg: MsSsimConfig | None = None,
            tape: GradTape | None = None) -> Tensor:
    """Scalar MS-SSIM in (0, 1] for inputs in [0,1]."""
    if y.shape != gt.shape:
        raise T.ShapeError(f"ms_ssim: shapes {y.shape} vs {gt.shape}")
    cfg = cfg or MsSsimConfig()
    n, c, h, w = y.shape
    scales = cfg.usable_scales(h, w)
    weights = cfg.weights_for(scales)
    kernel = Tensor(gaussian_window(cfg.window_size, cfg.window_sigma,
                                    y.dtype).reshape(1, 1, cfg.window_size,
                                                     cfg.window_size))
    a, b = y, gt
    product = None
    for s in range(scales):
        lum, cs = _ssim_terms(a, b, kernel, cfg, tape)
        term = T.mul(lum, cs, tape) if s == scales - 1 else cs
        # the mean contrast-structure term can dip below zero for wholly
        # uncorrelated pairs; floor it so the fractional power stays defined
        term = _clamp_min(term, 1e-4, tape)
        factor = T.power(term, float(weights[s]), tape)
        product = factor if product is None else T.mul(product, factor, tape)
        if s != scales - 1:
            a = T.avg_pool_k2(a, tape)
            b = T.avg_pool_k2(b, tape)
    return T.mean_all(product, tape)


def ms_ssim_loss(y, gt, cfg=None, tape=None) -> Tensor:
    return T.add_scalar(T.scale(ms_ssim(y, gt, cfg, tape), -1.0, tape), 1.0, tape)


def combined_loss(y: Tensor, gt: Tensor, lam: float,
                  cfg: MsSsimConfig | None = None,
                  tape: GradTape | None = None):
    """lam * (1 - MS-SSIM) + (1 - lam) * L1. Returns (total, l1, msssim)
    scalars; the component terms are reported for logging."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0,1]")
    l1 = l1_loss(y, gt, tape)
    ms = ms_ssim(y, gt, cfg, tape)
    ms_l = T.add_scalar(T.scale(ms, -1.0, tape), 1.0, tape)
    total = T.add(T.scale(ms_l, lam, tape), T.scale(l1, 1.0 - lam, tape), tape)
    return total, l1, ms
