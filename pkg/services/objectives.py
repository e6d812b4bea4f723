"""Pixel-space loss suite.

Images are tensors shaped [..., C, H, W]; masks are boolean [..., 1, H, W]
and broadcast over channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch

from framework.errors import InvalidArgumentError, NumericError


def _check_shapes(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor]) -> None:
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim < 3:
        raise InvalidArgumentError(f"expected [..., C, H, W], got {tuple(pred.shape)}")
    if mask is not None and (mask.shape[-2:] != pred.shape[-2:] or mask.shape[:-3] != pred.shape[:-3]):
        raise InvalidArgumentError(f"mask {tuple(mask.shape)} does not align with {tuple(pred.shape)}")


def mse_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared difference over (masked) pixels and channels."""
    _check_shapes(pred, target, mask)
    sq = (pred - target) ** 2
    if mask is None:
        return sq.mean()
    weight = mask.to(sq.dtype).expand_as(sq)
    count = weight.sum()
    if count == 0:
        raise InvalidArgumentError("mask is empty")
    return (sq * weight).sum() / count


def gm_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(sum|dx D| + sum|dy D|) / N with D = pred - target.

    Forward differences over valid positions, summed over channels; N = H*W
    pixels per image, averaged over any leading dims. With a mask, only
    differences between two foreground pixels count and N is the number of
    foreground pixels summed over all images (not the pair count), so a full
    mask reproduces the unmasked value.
    """
    _check_shapes(pred, target, mask)
    h, w = pred.shape[-2:]
    if h < 2 or w < 2:
        raise InvalidArgumentError(f"gradient matching needs H, W >= 2, got {h}x{w}")
    d = pred - target
    dx = (d[..., :, 1:] - d[..., :, :-1]).abs()
    dy = (d[..., 1:, :] - d[..., :-1, :]).abs()
    if mask is None:
        n_images = d[..., 0, 0, 0].numel()
        return (dx.sum() + dy.sum()) / (h * w * n_images)
    m = mask.to(d.dtype)
    mx = m[..., :, 1:] * m[..., :, :-1]
    my = m[..., 1:, :] * m[..., :-1, :]
    count = m.sum()
    if count == 0:
        raise InvalidArgumentError("mask is empty")
    return ((dx * mx).sum() + (dy * my).sum()) / count


@dataclass
class LossBreakdown:
    mse_albedo: torch.Tensor
    mse_rm: torch.Tensor
    gm_rm: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "mse_albedo": float(self.mse_albedo),
            "mse_rm": float(self.mse_rm),
            "gm_rm": float(self.gm_rm),
            "total": float(self.total),
        }


def total_loss(
    pred_albedo: torch.Tensor,
    gt_albedo: torch.Tensor,
    pred_rm: torch.Tensor,
    gt_rm: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    use_gm: bool = True,
) -> LossBreakdown:
    """L = MSE(A) + MSE(RM) + GM(RM), unit weights; GM is dropped when ``use_gm`` is off."""
    inputs = {"pred_albedo": pred_albedo, "gt_albedo": gt_albedo, "pred_rm": pred_rm, "gt_rm": gt_rm}
    for name, value in inputs.items():
        if torch.isnan(value).any():
            raise NumericError("NaN in loss input", component=name)
    mse_a = mse_loss(pred_albedo, gt_albedo, mask)
    mse_r = mse_loss(pred_rm, gt_rm, mask)
    gm = gm_loss(pred_rm, gt_rm, mask) if use_gm else torch.zeros((), dtype=mse_r.dtype, device=mse_r.device)
    for name, value in (("mse_albedo", mse_a), ("mse_rm", mse_r), ("gm_rm", gm)):
        if not torch.isfinite(value):
            raise NumericError("non-finite loss term", component=name)
    return LossBreakdown(mse_albedo=mse_a, mse_rm=mse_r, gm_rm=gm, total=mse_a + mse_r + gm)
