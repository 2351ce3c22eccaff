"""Supervision: masked MSE, soft-IoU loss, deep-supervision sums, and the
lambda-weighted total objective.

Per-map MSE is a mean over valid pixels (and channels) so magnitudes stay
comparable across side-output resolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    honor_ignore: bool = True

    def __post_init__(self):
        if not (0 < self.lam < 1):
            raise LossError("lambda must be in (0, 1)")


def _valid_weight(shape_like: torch.Tensor, ignore: torch.Tensor | None) -> torch.Tensor:
    if ignore is None:
        return torch.ones_like(shape_like)
    return (~ignore.bool()).to(shape_like.dtype)


def mse_masked(pred: torch.Tensor, target: torch.Tensor,
               ignore: torch.Tensor | None = None) -> torch.Tensor:
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    w = _valid_weight(pred, ignore)
    n = w.sum()
    if n == 0:
        return pred.sum() * 0.0
    return (w * (pred - target) ** 2).sum() / n


def iou_loss(pred_prob: torch.Tensor, target: torch.Tensor,
             ignore: torch.Tensor | None = None) -> torch.Tensor:
    if pred_prob.min() < 0 or pred_prob.max() > 1:
        raise LossError("iou_loss expects probabilities in [0, 1]")
    if pred_prob.shape != target.shape:
        raise LossError("shape mismatch")
    w = _valid_weight(pred_prob, ignore)
    p = pred_prob * w
    g = target.to(pred_prob.dtype) * w
    inter = (p * g).sum()
    union = (p + g - p * g).sum()
    if union == 0:
        return pred_prob.sum() * 0.0
    return 1.0 - inter / union


def downsample_mask_targets(fg: torch.Tensor, ignore: torch.Tensor,
                            size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Resample full-resolution tri-state supervision to a side-output size.

    Returns (soft target for MSE, binary target for IoU, ignore mask).
    Foreground downsamples by area averaging; IGNORE by max-pooling so any
    uncertain pixel in the cell excludes the whole cell.
    """
    fg4 = fg.to(torch.float32)[None, None] if fg.dim() == 2 else fg.to(torch.float32)
    ig4 = ignore.to(torch.float32)[None, None] if ignore.dim() == 2 else ignore.to(torch.float32)
    soft = F.adaptive_avg_pool2d(fg4, size)
    ig = F.adaptive_max_pool2d(ig4, size) > 0.5
    hard = soft > 0.5
    if fg.dim() == 2:
        return soft[0, 0], hard[0, 0], ig[0, 0]
    return soft, hard, ig


def seg_loss(side_masks: list[torch.Tensor], tri_targets: list[tuple],
             honor_ignore: bool = True) -> torch.Tensor:
    """Sum of (MSE + IoU) over the 11 mask side outputs.

    tri_targets[i] = (soft_target, hard_target, ignore) at side i's resolution.
    """
    if len(side_masks) != 11:
        raise LossError(f"expected 11 mask side outputs, got {len(side_masks)}")
    if len(tri_targets) != 11:
        raise LossError("expected 11 targets")
    total = None
    for logits, (soft, hard, ig) in zip(side_masks, tri_targets):
        ig_used = ig if honor_ignore else None
        prob = torch.sigmoid(logits)
        term = mse_masked(prob, soft.to(prob.dtype).expand_as(prob), ig_used if ig_used is None else ig_used.expand_as(prob)) \
            + iou_loss(prob, hard.to(prob.dtype).expand_as(prob), ig_used if ig_used is None else ig_used.expand_as(prob))
        total = term if total is None else total + term
    return total


def diam_loss(side_heatmaps: list[torch.Tensor],
              target_heatmaps: list[torch.Tensor]) -> torch.Tensor:
    """Sum of per-side MSE over the 3 diameter side outputs (4 channels
    each; targets regenerated per resolution, never downsampled)."""
    if len(side_heatmaps) != 3:
        raise LossError(f"expected 3 diameter side outputs, got {len(side_heatmaps)}")
    if len(target_heatmaps) != 3:
        raise LossError("expected 3 targets")
    total = None
    for pred, target in zip(side_heatmaps, target_heatmaps):
        if pred.shape[-3] != 4:
            raise LossError("diameter maps must have 4 channels")
        term = mse_masked(pred, target.to(pred.dtype).expand_as(pred))
        total = term if total is None else total + term
    return total


def total_loss(l_seg: torch.Tensor, l_dp: torch.Tensor,
               cfg: LossConfig = LossConfig()) -> torch.Tensor:
    for v in (l_seg, l_dp):
        val = float(v.detach() if isinstance(v, torch.Tensor) else v)
        if math.isnan(val) or math.isinf(val):
            raise LossError("non-finite loss component")
    return cfg.lam * l_seg + (1.0 - cfg.lam) * l_dp
