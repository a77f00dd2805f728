"""Evaluation metrics: PSNR, single-scale SSIM, and UIQM.

These are plain numpy paths with no gradient support. UIQM follows the
referenced underwater-quality formulation (see docs/metrics.md for the
constants and block conventions):

  UICM   asymmetric alpha-trimmed (10% both ends) statistics of the
         RG = R-G and YB = (R+G)/2 - B opponent channels
  UISM   Sobel edge maps per channel multiplied with the channel, EME
         over 8x8-pixel blocks, combined with luma weights
  UIConM logAMEE (PLIP, gamma 1026) over 8x8-pixel blocks of the luma
  UIQM   0.0282*UICM + 0.2953*UISM + 3.5753*UIConM

All UIQM sub-terms are computed on the 0..255 intensity scale; inputs
here are [0,1] tensors/arrays and are rescaled internally. Degenerate
blocks (max == min, or a zero bound that would blow up a log) contribute
exactly 0, so 8-bit-quantized inputs can never produce NaN or Inf.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .losses import MsSsimConfig, gaussian_window

UIQM_C1, UIQM_C2, UIQM_C3 = 0.0282, 0.2953, 3.5753
PLIP_GAMMA = 1026.0
UIQM_BLOCK = 8
ALPHA_TRIM = 0.1
LUMA = (0.299, 0.587, 0.114)


def _as_chw(img):
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("metrics expect a single image")
        a = a[0]
    return a


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_metric(a, b, cfg: MsSsimConfig | None = None) -> float:
    """Single-scale SSIM: mean of the local SSIM map, averaged over
    channels. Same 11x11 sigma-1.5 Gaussian window as the loss module."""
    cfg = cfg or MsSsimConfig()
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} vs {b.shape}")
    if min(a.shape[1], a.shape[2]) < cfg.window_size:
        raise ValueError(f"ssim: image smaller than window {cfg.window_size}")
    k = gaussian_window(cfg.window_size, cfg.window_sigma)

    def blur(x):
        from . import backend
        return backend.conv2d_forward(
            x[:, None], k[None, None], np.zeros(1), 1, 0)[:, 0]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_a ** 2 + mu_b ** 2 + cfg.c1) * (var_a + var_b + cfg.c2)
    return float(np.mean(num / den))


# -- UIQM -------------------------------------------------------------------


def _trimmed_stats(values):
    v = np.sort(values, axis=None)
    t = int(ALPHA_TRIM * v.size)
    trimmed = v[t : v.size - t]
    mu = float(np.mean(trimmed))
    var = float(np.mean((trimmed - mu) ** 2))
    return mu, var


def uicm(rgb255) -> float:
    r, g, b = rgb255[0], rgb255[1], rgb255[2]
    mu_rg, var_rg = _trimmed_stats(r - g)
    mu_yb, var_yb = _trimmed_stats((r + g) / 2.0 - b)
    return (-0.0268 * math.sqrt(mu_rg ** 2 + mu_yb ** 2)
            + 0.1586 * math.sqrt(var_rg + var_yb))


def _sobel_magnitude(ch):
    """3x3 Sobel with reflect padding."""
    kx = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64)
    ky = kx.T
    p = np.pad(ch, 1, mode="reflect")
    h, w = ch.shape
    gx = np.zeros_like(ch)
    gy = np.zeros_like(ch)
    for u in range(3):
        for v in range(3):
            win = p[u : u + h, v : v + w]
            gx += kx[u, v] * win
            gy += ky[u, v] * win
    return np.sqrt(gx * gx + gy * gy)


def _blocks(ch, size):
    h, w = ch.shape
    nx, ny = math.ceil(h / size), math.ceil(w / size)
    for i in range(nx):
        for j in range(ny):
            yield ch[i * size : min((i + 1) * size, h),
                     j * size : min((j + 1) * size, w)]


def _eme(ch, size=UIQM_BLOCK) -> float:
    h, w = ch.shape
    nx, ny = math.ceil(h / size), math.ceil(w / size)
    total = 0.0
    for block in _blocks(ch, size):
        bmin, bmax = float(block.min()), float(block.max())
        if bmin <= 0.0 or bmax <= 0.0 or bmax == bmin:
            continue
        total += math.log(bmax / bmin)
    return 2.0 / (nx * ny) * total


def uism(rgb255) -> float:
    total = 0.0
    for lam, ch in zip(LUMA, rgb255):
        edge = ch * _sobel_magnitude(ch)
        total += lam * _eme(edge)
    return total


def _plip_sub(a, b):
    return PLIP_GAMMA * (a - b) / (PLIP_GAMMA - b)


def _plip_sum(a, b):
    return a + b - a * b / PLIP_GAMMA


def uiconm(rgb255) -> float:
    gray = LUMA[0] * rgb255[0] + LUMA[1] * rgb255[1] + LUMA[2] * rgb255[2]
    h, w = gray.shape
    nx, ny = math.ceil(h / UIQM_BLOCK), math.ceil(w / UIQM_BLOCK)
    s = 0.0
    for block in _blocks(gray, UIQM_BLOCK):
        bmin, bmax = float(block.min()), float(block.max())
        top = _plip_sub(bmax, bmin)
        bot = _plip_sum(bmax, bmin)
        m = top / bot if bot != 0.0 else 0.0
        if m > 0.0:
            s += m * math.log(m)
    wgt = 1.0 / (nx * ny)
    return PLIP_GAMMA - PLIP_GAMMA * (1.0 - s / PLIP_GAMMA) ** wgt


def uiqm(img) -> tuple[float, float, float, float]:
    """Returns (uiqm, uicm, uism, uiconm) for a 3-channel [0,1] image."""
    chw = _as_chw(img)
    if chw.shape[0] != 3:
        raise ValueError("uiqm expects a 3-channel image")
    rgb255 = chw * 255.0
    c = uicm(rgb255)
    s = uism(rgb255)
    m = uiconm(rgb255)
    return UIQM_C1 * c + UIQM_C2 * s + UIQM_C3 * m, c, s, m


# -- directory evaluation -----------------------------------------------------

FULL_REFERENCE = {"psnr", "ssim"}
ALL_METRICS = {"psnr", "ssim", "uiqm"}
CSV_HEADER = ["name", "psnr_db", "ssim", "uiqm", "uicm", "uism", "uiconm"]


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def mean(self, key):
        vals = [r[key] for r in self.rows if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r["name"]] + [_fmt(r.get(k)) for k in CSV_HEADER[1:]])


def _fmt(v):
    if v is None:
        return ""
    if v == math.inf:
        return "inf"
    return f"{v:.6f}"


def evaluate_dir(enhanced_dir, reference_dir=None, metrics=("psnr", "ssim", "uiqm")):
    """Per-image metric rows over a directory of images, sorted by name.
    Full-reference metrics need a reference_dir with matching filenames;
    unpaired files are skipped with a warning row."""
    from .formats import read_image

    metrics = set(metrics)
    unknown = metrics - ALL_METRICS
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    need_ref = bool(metrics & FULL_REFERENCE)
    if need_ref and reference_dir is None:
        raise ValueError("psnr/ssim need a reference directory")

    report = MetricReport()
    names = sorted(f for f in os.listdir(enhanced_dir)
                   if f.lower().endswith((".ppm", ".png")))
    for name in names:
        enh = read_image(os.path.join(enhanced_dir, name))
        row = {"name": name}
        if need_ref:
            ref_path = os.path.join(reference_dir, name)
            if not os.path.exists(ref_path):
                report.warnings.append(f"unpaired file skipped: {name}")
                continue
            ref = read_image(ref_path)
            if "psnr" in metrics:
                row["psnr_db"] = psnr(enh.data, ref.data)
            if "ssim" in metrics:
                row["ssim"] = ssim_metric(enh.data, ref.data)
        if "uiqm" in metrics:
            q, c, s, m = uiqm(enh.data)
            row.update(uiqm=q, uicm=c, uism=s, uiconm=m)
        report.rows.append(row)
    return report
