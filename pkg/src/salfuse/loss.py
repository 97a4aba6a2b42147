"""Pixel position-aware training loss.

Each logit map is scored by a weighted binary cross-entropy plus a weighted
IoU term, both using per-pixel weights that emphasise pixels whose local
neighbourhood mean differs from their own value, i.e. boundaries:

    omega = 1 + gain * |boxmean_window(gt) - gt|

The box mean divides by the number of in-bounds pixels per window, so a
constant ground truth yields omega = 1 everywhere, borders included.  Both
terms are normalised per image and averaged over the batch; the BCE term is
computed from logits in exp-overflow-safe form.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import LossConfig
from .errors import ValidationError
from .model import ForwardOutput


def box_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Mean over a centred window x window neighbourhood, last two axes.

    Windows are clipped at the borders and the divisor is the clipped pixel
    count, so constant inputs are exact fixed points.
    """
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"box_mean window must be odd and positive, got {window}")
    h, w = x.shape[-2:]
    r = window // 2
    ii = np.zeros(x.shape[:-2] + (h + 1, w + 1), dtype=np.float64)
    ii[..., 1:, 1:] = x.astype(np.float64).cumsum(axis=-2).cumsum(axis=-1)
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    sums = (ii[..., y1[:, None], x1[None, :]] - ii[..., y0[:, None], x1[None, :]]
            - ii[..., y1[:, None], x0[None, :]] + ii[..., y0[:, None], x0[None, :]])
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return (sums / counts).astype(x.dtype)


def edge_weights(gt: np.ndarray, gain: float, window: int) -> np.ndarray:
    """Per-pixel loss weights, large near label boundaries, 1 in flat areas."""
    return 1.0 + gain * np.abs(box_mean(gt, window) - gt)


def _validate_pair(logits: ad.Tensor, gt: np.ndarray) -> None:
    if logits.data.ndim != 4 or logits.data.shape[1] != 1:
        raise ValidationError(f"logits must be (N, 1, H, W), got {logits.data.shape}")
    if gt.shape != logits.data.shape:
        raise ValidationError(f"ground truth shape {gt.shape} != logits shape {logits.data.shape}")
    if gt.min() < 0.0 or gt.max() > 1.0:
        raise ValidationError(f"ground truth values must lie in [0, 1], got [{gt.min()}, {gt.max()}]")


def ppa_loss(logits: ad.Tensor, gt: np.ndarray, cfg: LossConfig | None = None) -> ad.Tensor:
    """Boundary-weighted BCE + boundary-weighted IoU, scalar over the batch."""
    cfg = cfg or LossConfig()
    gt = np.asarray(gt)
    _validate_pair(logits, gt)
    dtype = logits.data.dtype
    g = ad.Tensor(gt.astype(dtype))
    w = ad.Tensor(edge_weights(gt, cfg.edge_weight_gain, cfg.edge_window).astype(dtype))

    # bce(x, g) = softplus(x) - x*g, elementwise from logits
    bce = ad.sub(ad.softplus(logits), ad.mul(logits, g))
    wbce = ad.div(ad.sum_per_image(ad.mul(w, bce)), ad.sum_per_image(w))

    p = ad.sigmoid(logits)
    pg = ad.mul(p, g)
    inter = ad.sum_per_image(ad.mul(w, pg))
    union = ad.sum_per_image(ad.mul(w, ad.sub(ad.add(p, g), pg)))
    s = cfg.iou_smoothing
    wiou = ad.add_scalar(-ad.div(ad.add_scalar(inter, s), ad.add_scalar(union, s)), 1.0)

    per_image = ad.add(wbce, wiou)
    return ad.mean_all(per_image)


def total_loss(out: ForwardOutput, gt: np.ndarray, cfg: LossConfig | None = None) -> ad.Tensor:
    """Sum of the per-map losses: shared plus both modality maps when present."""
    loss = ppa_loss(out.s_shared, gt, cfg)
    if out.s_rgb is not None:
        loss = ad.add(loss, ppa_loss(out.s_rgb, gt, cfg))
    if out.s_depth is not None:
        loss = ad.add(loss, ppa_loss(out.s_depth, gt, cfg))
    return loss
