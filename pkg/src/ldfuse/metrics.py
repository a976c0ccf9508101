"""Fusion quality metrics and depth error.

All five fusion metrics operate on 8-bit-quantized grayscale images in
[0, 255]: fused and visible inputs are converted via BT.601 luminance and
rounded, the infrared source is scaled by 255.  Definitions follow the
canonical fusion-benchmark literature; every constant is pinned here so the
numbers reproduce bit-for-bit.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve as nd_convolve
from scipy.ndimage import correlate as nd_correlate

from .errors import DomainError, ShapeError, SizeError
from .imageio import DepthMap, luminance

__all__ = [
    "FusionReport", "sf", "sd", "mi", "qabf", "vif", "depth_rmse",
    "quantize_fused", "quantize_ir", "quantize_vis", "fusion_metrics",
    "aggregate_reports", "reports_to_csv", "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("SF", "Qab/f", "MI", "SD", "VIF")

# Xydeas-Petrovic edge-preservation sigmoid constants.
QABF_GAMMA_G = 0.9994
QABF_KAPPA_G = -15.0
QABF_SIGMA_G = 0.5
QABF_GAMMA_A = 0.9879
QABF_KAPPA_A = -22.0
QABF_SIGMA_A = 0.8

VIF_NOISE_VAR = 2.0
VIF_SCALES = 4
VIF_EPS = 1e-10


@dataclass
class FusionReport:
    """Per-pair metric record."""

    pair_id: str
    sf: float
    qabf: float
    mi: float
    sd: float
    vif: float
    depth_rmse_fused: float = None
    depth_rmse_vis: float = None
    depth_rmse_ir: float = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sf < 0 or self.sd < 0 or self.mi < 0 or self.vif < 0:
            raise DomainError("sf, sd, mi, vif must be non-negative")
        if not 0.0 <= self.qabf <= 1.0:
            raise DomainError("qabf must lie in [0, 1]")

    def to_record(self):
        rec = {
            "pair_id": self.pair_id,
            "sf": self.sf, "qabf": self.qabf, "mi": self.mi,
            "sd": self.sd, "vif": self.vif,
        }
        for key in ("depth_rmse_fused", "depth_rmse_vis", "depth_rmse_ir"):
            val = getattr(self, key)
            if val is not None:
                rec[key] = val
        rec.update(self.extra)
        return rec


def _gray(img, name="image"):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D grayscale array, got {arr.shape}")
    return arr


def quantize_fused(fused_rgb01):
    """round(255 * luminance(fused))."""
    return np.round(255.0 * luminance(fused_rgb01)[:, :, 0])


quantize_vis = quantize_fused


def quantize_ir(ir01):
    """255 * ir (infrared is already single-channel)."""
    arr = np.asarray(ir01, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return 255.0 * arr


# -- individual metrics -------------------------------------------------------

def sf(F) -> float:
    """Spatial frequency: RMS of horizontal and vertical neighbour differences."""
    F = _gray(F, "F")
    h, w = F.shape
    if h < 2 or w < 2:
        raise SizeError("spatial frequency needs at least a 2x2 image")
    rf2 = np.sum((F[:, 1:] - F[:, :-1]) ** 2) / (h * (w - 1))
    cf2 = np.sum((F[1:, :] - F[:-1, :]) ** 2) / ((h - 1) * w)
    return float(np.sqrt(rf2 + cf2))


def sd(F) -> float:
    """Population standard deviation of the samples."""
    return float(np.std(_gray(F, "F")))


def _hist_mi(x, y) -> float:
    """Mutual information (bits) from a 256x256 joint histogram."""
    xi = np.clip(np.round(x), 0, 255).astype(np.intp)
    yi = np.clip(np.round(y), 0, 255).astype(np.intp)
    joint = np.zeros((256, 256))
    np.add.at(joint, (xi.ravel(), yi.ravel()), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0.0
    denom = np.outer(px, py)
    return float(np.sum(joint[nz] * np.log2(joint[nz] / denom[nz])))


def mi(F, A, B) -> float:
    """MI(F,A) + MI(F,B) over 256-bin joint histograms, log base 2."""
    F, A, B = _gray(F, "F"), _gray(A, "A"), _gray(B, "B")
    if F.shape != A.shape or F.shape != B.shape:
        raise ShapeError("mi inputs must share one shape")
    return _hist_mi(F, A) + _hist_mi(F, B)


def _sobel_strength_orientation(img):
    # replicate borders (no phantom frame edges), matching the gradient loss
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    gx = nd_correlate(img, kx, mode="nearest")
    gy = nd_correlate(img, kx.T, mode="nearest")
    g = np.hypot(gx, gy)
    a = np.full(img.shape, np.pi / 2)
    nz = gx != 0.0
    a[nz] = np.arctan(gy[nz] / gx[nz])
    return g, a


def _edge_preservation(g_src, a_src, g_f, a_f):
    ratio = np.zeros_like(g_src)
    hi = g_src > g_f
    lo = g_src < g_f
    eq = ~hi & ~lo
    ratio[hi] = g_f[hi] / g_src[hi]
    ratio[lo] = g_src[lo] / g_f[lo]
    ratio[eq] = g_f[eq]  # canonical reference-code convention for exact ties
    # undirected orientation distance, folded into [0, pi/2]
    delta = np.abs(a_src - a_f)
    delta = np.minimum(delta, np.pi - delta)
    a_pres = 1.0 - delta / (np.pi / 2)
    q_g = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (ratio - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (a_pres - QABF_SIGMA_A)))
    return q_g * q_a


def qabf(F, A, B) -> float:
    """Xydeas-Petrovic gradient-based edge preservation, weighted by edge strength."""
    F, A, B = _gray(F, "F"), _gray(A, "A"), _gray(B, "B")
    if F.shape != A.shape or F.shape != B.shape:
        raise ShapeError("qabf inputs must share one shape")
    g_f, a_f = _sobel_strength_orientation(F)
    g_a, a_a = _sobel_strength_orientation(A)
    g_b, a_b = _sobel_strength_orientation(B)
    q_af = _edge_preservation(g_a, a_a, g_f, a_f)
    q_bf = _edge_preservation(g_b, a_b, g_f, a_f)
    wsum = np.sum(g_a + g_b)
    if wsum == 0.0:
        return 0.0
    return float(np.sum(q_af * g_a + q_bf * g_b) / wsum)


def _gaussian_kernel(n, sigma):
    m = (n - 1) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return h / h.sum()


def _vif_single(ref, dist) -> float:
    """Pixel-domain VIF of `dist` against reference `ref`, 4 scales.

    Local statistics use reflect-padded same-size filtering so the metric is
    exactly invariant under horizontal flips of all inputs.
    """
    num = 0.0
    den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        win = _gaussian_kernel(n, n / 5.0)
        if min(ref.shape) < n:
            raise SizeError(
                f"VIF needs images of at least {n} pixels per side at scale {scale}")
        if scale > 1:
            ref = nd_convolve(ref, win, mode="reflect")[::2, ::2]
            dist = nd_convolve(dist, win, mode="reflect")[::2, ::2]
        mu1 = nd_convolve(ref, win, mode="reflect")
        mu2 = nd_convolve(dist, win, mode="reflect")
        var1 = nd_convolve(ref * ref, win, mode="reflect") - mu1 * mu1
        var2 = nd_convolve(dist * dist, win, mode="reflect") - mu2 * mu2
        cov = nd_convolve(ref * dist, win, mode="reflect") - mu1 * mu2
        var1 = np.maximum(var1, 0.0)
        var2 = np.maximum(var2, 0.0)

        g = cov / (var1 + VIF_EPS)
        sv = var2 - g * cov
        g[var1 < VIF_EPS] = 0.0
        sv[var1 < VIF_EPS] = var2[var1 < VIF_EPS]
        var1[var1 < VIF_EPS] = 0.0
        g[var2 < VIF_EPS] = 0.0
        sv[var2 < VIF_EPS] = 0.0
        sv[g < 0.0] = var2[g < 0.0]
        g[g < 0.0] = 0.0
        sv[sv <= VIF_EPS] = VIF_EPS

        num += np.sum(np.log2(1.0 + g * g * var1 / (sv + VIF_NOISE_VAR)))
        den += np.sum(np.log2(1.0 + var1 / VIF_NOISE_VAR))
    if den == 0.0:
        raise DomainError("VIF undefined: reference image carries no information")
    return float(num / den)


def vif(F, A, B) -> float:
    """Mean of VIF(A->F) and VIF(B->F)."""
    F, A, B = _gray(F, "F"), _gray(A, "A"), _gray(B, "B")
    if F.shape != A.shape or F.shape != B.shape:
        raise ShapeError("vif inputs must share one shape")
    largest = 2 ** VIF_SCALES + 1
    if min(F.shape) < largest:
        raise SizeError(f"VIF needs images of at least {largest} pixels per side")
    return 0.5 * (_vif_single(A.copy(), F.copy()) + _vif_single(B.copy(), F.copy()))


def depth_rmse(gt: DepthMap, pred: DepthMap) -> float:
    """Root-mean-square depth error in meters over valid ground-truth pixels."""
    if not isinstance(pred, DepthMap):
        pred = DepthMap(np.asarray(pred))
    if gt.shape != pred.shape:
        raise ShapeError("depth maps must share one shape")
    mask = gt.valid
    if not mask.any():
        raise DomainError("depth_rmse requires at least one valid pixel")
    diff = gt.depth[mask].astype(np.float64) - pred.depth[mask].astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


# -- report assembly -----------------------------------------------------------

def fusion_metrics(fused_rgb01, ir01, vis_rgb01, pair_id="pair") -> FusionReport:
    """All five metrics for one fused image against its sources."""
    F = quantize_fused(fused_rgb01)
    A = quantize_ir(ir01)
    B = quantize_vis(vis_rgb01)
    return FusionReport(
        pair_id=pair_id,
        sf=sf(F), qabf=qabf(F, A, B), mi=mi(F, A, B), sd=sd(F), vif=vif(F, A, B),
    )


def aggregate_reports(reports) -> dict:
    """Mean per metric over a list of FusionReports."""
    if not reports:
        raise DomainError("cannot aggregate an empty report list")
    out = {}
    for key in ("sf", "qabf", "mi", "sd", "vif",
                "depth_rmse_fused", "depth_rmse_vis", "depth_rmse_ir"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = float(np.mean(vals))
    return out


def reports_to_csv(rows) -> str:
    """Aggregate rows -> CSV text in Table-1 column order (SF, Qab/f, MI, SD, VIF)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("label",) + METRIC_COLUMNS)
    for label, agg in rows:
        writer.writerow([label] + [repr(agg[k]) for k in ("sf", "qabf", "mi", "sd", "vif")])
    return buf.getvalue()
