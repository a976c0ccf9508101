"""Training objectives.

Every loss accepts NumPy arrays or autodiff Tensors for the argument that
is being optimized and returns a LossValue carrying the scalar, the named
sub-losses, and (when any input carried gradients) the scalar Tensor for
backpropagation.  All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ParameterError, ShapeError
from .imageio import LUMA_WEIGHTS, DepthMap

__all__ = [
    "LossValue", "silog", "l_diff", "l_mcg", "l_mci", "l_fusion",
    "l_depth_driven", "total_fusion_loss", "sobel_magnitude", "luminance_t",
]


@dataclass
class LossValue:
    """Scalar objective with its named components."""

    value: float
    components: dict = field(default_factory=dict)
    tensor: ad.Tensor = None

    def to_record(self, step=None):
        rec = {} if step is None else {"step": int(step)}
        rec.update({"total": self.value, "components": dict(self.components)})
        return rec


def _as_t(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))


def _finish(tensor, components=None):
    keep = tensor._vjp is not None or tensor.requires_grad
    return LossValue(
        value=float(tensor.data),
        components=dict(components or {}),
        tensor=tensor if keep else None,
    )


def _hw(x):
    shape = x.data.shape if isinstance(x, ad.Tensor) else np.asarray(x).shape
    return shape


# -- depth -----------------------------------------------------------------

def silog(gt: DepthMap, pred) -> LossValue:
    """Scale-invariant log loss: variance of log(gt) - log(pred) over valid pixels."""
    if not isinstance(gt, DepthMap):
        gt = DepthMap(np.asarray(gt))
    pred_t = pred if isinstance(pred, ad.Tensor) else _as_t(
        pred.depth if isinstance(pred, DepthMap) else pred)
    pshape = pred_t.data.shape
    if pshape[-1:] == (1,) and len(pshape) == 3:
        pred_t = ad.reshape(pred_t, pshape[:2])
        pshape = pred_t.data.shape
    if pshape != gt.shape:
        raise ShapeError(f"pred shape {pshape} != gt shape {gt.shape}")
    if np.any(pred_t.data <= 0.0) or not np.all(np.isfinite(pred_t.data)):
        raise DomainError("silog requires strictly positive, finite predictions")
    n = int(gt.valid.sum())
    if n == 0:
        raise DomainError("silog requires at least one valid ground-truth pixel")
    mask = gt.valid.astype(np.float64)
    ylog = np.zeros(gt.shape)
    ylog[gt.valid] = np.log(gt.depth[gt.valid].astype(np.float64))
    d = (ad.Tensor(ylog) - ad.log(pred_t)) * ad.Tensor(mask)
    s1 = ad.tsum(d) * (1.0 / n)
    s2 = ad.tsum(d * d) * (1.0 / n)
    out = s2 - s1 * s1
    return _finish(out, {"silog": float(out.data)})


# -- diffusion ---------------------------------------------------------------

def l_diff(eps_hat, noise, reduction="mse") -> LossValue:
    """Noise-prediction loss; `mse` by default, `l2` for the strict norm."""
    eps_t = _as_t(eps_hat)
    noise_t = _as_t(noise)
    if eps_t.data.shape != noise_t.data.shape:
        raise ShapeError(
            f"eps_hat shape {eps_t.data.shape} != noise shape {noise_t.data.shape}")
    delta = eps_t - noise_t
    sq = ad.tsum(delta * delta)
    if reduction == "mse":
        out = sq * (1.0 / delta.data.size)
    elif reduction == "l2":
        out = ad.sqrt(sq)
    else:
        raise ParameterError(f"unknown reduction {reduction!r}")
    return _finish(out, {"l_diff": float(out.data)})


# -- fusion -------------------------------------------------------------------

def sobel_magnitude(x) -> ad.Tensor:
    """Per-channel 3x3 Sobel gradient magnitude with replicate borders.

    Accepts (H,W,C) or (N,H,W,C); returns a Tensor of the same shape.
    """
    t = _as_t(x)
    squeeze = t.data.ndim == 3
    if squeeze:
        t = ad.reshape(t, (1,) + t.data.shape)
    n, h, w, c = t.data.shape
    xp = ad.pad_edge(t, 1)

    def sh(i, j):
        return xp[:, i:i + h, j:j + w, :]

    gx = (sh(0, 2) + 2.0 * sh(1, 2) + sh(2, 2)) - (sh(0, 0) + 2.0 * sh(1, 0) + sh(2, 0))
    gy = (sh(2, 0) + 2.0 * sh(2, 1) + sh(2, 2)) - (sh(0, 0) + 2.0 * sh(0, 1) + sh(0, 2))
    mag = ad.hypot(gx, gy)
    return ad.reshape(mag, (h, w, c)) if squeeze else mag


def luminance_t(rgb) -> ad.Tensor:
    """Differentiable BT.601 luminance, (...,3) -> (...,1)."""
    t = _as_t(rgb)
    if t.data.shape[-1] != 3:
        raise ShapeError(f"luminance expects a 3-channel input, got {t.data.shape}")
    r, g, b = (t[..., 0:1], t[..., 1:2], t[..., 2:3])
    return r * LUMA_WEIGHTS[0] + g * LUMA_WEIGHTS[1] + b * LUMA_WEIGHTS[2]


def _check_fusion_shapes(fused, ir, vis):
    fs, irs, vs = _hw(fused), _hw(ir), _hw(vis)
    if len(irs) == 2:
        irs = irs + (1,)
    if fs[-1] != 3 or vs[-1] != 3 or irs[-1] != 1:
        raise ShapeError(f"need fused/vis HxWx3 and ir HxWx1, got {fs}, {vs}, {irs}")
    if fs[:2] != vs[:2] or fs[:2] != irs[:2]:
        raise ShapeError(f"spatial dims differ: fused {fs}, ir {irs}, vis {vs}")
    return fs[0], fs[1]


def _ensure_3d(x):
    t = _as_t(x)
    if t.data.ndim == 2:
        t = ad.reshape(t, t.data.shape + (1,))
    return t


def l_mcg(fused, ir, vis) -> LossValue:
    """Pull fused Sobel magnitudes toward the per-channel max of the sources."""
    h, w = _check_fusion_shapes(fused, ir, vis)
    mag_f = sobel_magnitude(_ensure_3d(fused))
    mag_ir = sobel_magnitude(_ensure_3d(ir))
    mag_vis = sobel_magnitude(_ensure_3d(vis))
    target = ad.maximum(mag_ir, mag_vis)  # ties route to ir
    out = ad.tsum(ad.absolute(mag_f - target)) * (1.0 / (h * w))
    return _finish(out, {"l_mcg": float(out.data)})


def l_mci(fused, ir, vis) -> LossValue:
    """Pull fused intensities toward the per-channel max of the sources."""
    h, w = _check_fusion_shapes(fused, ir, vis)
    target = ad.maximum(_ensure_3d(ir), _ensure_3d(vis))  # ties route to ir
    out = ad.tsum(ad.absolute(_ensure_3d(fused) - target)) * (1.0 / (h * w))
    return _finish(out, {"l_mci": float(out.data)})


def l_fusion(fused, ir, vis) -> LossValue:
    """Gradient plus intensity objective."""
    mcg = l_mcg(fused, ir, vis)
    mci = l_mci(fused, ir, vis)
    if mcg.tensor is not None:
        out = mcg.tensor + mci.tensor
    else:
        out = ad.Tensor(mcg.value + mci.value)
    return _finish(out, {"l_mcg": mcg.value, "l_mci": mci.value})


def l_depth_driven(fused, gt: DepthMap, depth_vis, depth_ir) -> LossValue:
    """SiLog of both depth branches applied to the fused image.

    The visible branch sees the fused RGB, the infrared branch its luminance.
    """
    fused_t = _ensure_3d(fused)
    if fused_t.data.shape[-1] != 3:
        raise ShapeError(f"fused must be HxWx3, got {fused_t.data.shape}")
    batched = ad.reshape(fused_t, (1,) + fused_t.data.shape)
    pred_vis = depth_vis.forward(batched)
    pred_ir = depth_ir.forward(luminance_t(batched))
    hw = fused_t.data.shape[:2]
    s_vis = silog(gt, ad.reshape(pred_vis, hw))
    s_ir = silog(gt, ad.reshape(pred_ir, hw))
    if s_vis.tensor is not None:
        out = s_vis.tensor + s_ir.tensor
    else:
        out = ad.Tensor(s_vis.value + s_ir.value)
    return _finish(out, {"silog_vis_branch": s_vis.value, "silog_ir_branch": s_ir.value})


def total_fusion_loss(fused, ir, vis, gt, estimators, lambda_depth=1.0) -> LossValue:
    """l_fusion + lambda_depth * l_depth_driven."""
    if lambda_depth < 0.0:
        raise ParameterError("lambda_depth must be >= 0")
    fus = l_fusion(fused, ir, vis)
    components = dict(fus.components)
    out = fus.tensor if fus.tensor is not None else ad.Tensor(fus.value)
    if lambda_depth > 0.0:
        est_vis, est_ir = estimators
        dd = l_depth_driven(fused, gt, est_vis, est_ir)
        components["l_depth_driven"] = dd.value
        dd_t = dd.tensor if dd.tensor is not None else ad.Tensor(dd.value)
        out = out + lambda_depth * dd_t
    else:
        components["l_depth_driven"] = 0.0
    return _finish(out, components)
