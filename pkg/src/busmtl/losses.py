"""Segmentation and classification objectives.

All losses reduce to a per-sample value first and then to the batch mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


def _pair(pred, gt) -> tuple[torch.Tensor, torch.Tensor]:
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    return pred, gt


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    # H x W -> 1 x H*W ; B x H x W -> B x H*W
    return x.reshape(1, -1) if x.ndim <= 2 else x.reshape(x.shape[0], -1)


def bce_loss(pred, gt) -> torch.Tensor:
    """Mean pixel binary cross-entropy on probabilities."""
    pred, gt = _pair(pred, gt)
    p = _per_sample(pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
    y = _per_sample(gt)
    per_pixel = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    return per_pixel.mean(dim=1).mean()


def dice_loss(pred, gt, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss ``1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps)``."""
    pred, gt = _pair(pred, gt)
    p, y = _per_sample(pred), _per_sample(gt)
    dice = (2.0 * (y * p).sum(dim=1) + eps) / (y.sum(dim=1) + p.sum(dim=1) + eps)
    return (1.0 - dice).mean()


def ce_loss(probs, labels) -> torch.Tensor:
    """Cross-entropy ``-log p[label]`` on probabilities, batch-averaged."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if probs.ndim == 1:
        probs, labels = probs[None], labels.reshape(1)
    picked = probs.gather(1, labels[:, None])[:, 0]
    return -torch.log(picked.clamp(PROB_CLAMP, 1.0)).mean()


def total_loss(seg, ce, lambda_seg: float = 0.6):
    return lambda_seg * seg + (1.0 - lambda_seg) * ce


@dataclass(frozen=True)
class LossBreakdown:
    bce: float
    dice: float
    seg: float
    ce: float
    total: float
    lambda_seg: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def loss_breakdown(mask_probs, gt_masks, class_probs, labels, lambda_seg: float
                   ) -> tuple[torch.Tensor, LossBreakdown]:
    """Differentiable total loss plus its detached components."""
    bce = bce_loss(mask_probs, gt_masks)
    dice = dice_loss(mask_probs, gt_masks)
    seg = bce + dice
    ce = ce_loss(class_probs, labels)
    total = total_loss(seg, ce, lambda_seg)
    return total, LossBreakdown(
        bce=bce.item(), dice=dice.item(), seg=seg.item(), ce=ce.item(), total=total.item(), lambda_seg=lambda_seg
    )
