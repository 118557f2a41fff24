"""Classification branch: mask-derived attention, mask-guided pooling, FC head."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .core import NUM_CLASSES, RunConfig
from .encoder import make_activation

POOL_EPS = 1e-6


def mask_to_attention(mask: torch.Tensor, grid_shape: tuple[int, int]) -> torch.Tensor:
    """Area-average a B x H x W mask down to B x gh x gw."""
    mask = torch.as_tensor(mask)
    squeeze = mask.ndim == 2
    if squeeze:
        mask = mask[None]
    h, w = mask.shape[-2:]
    gh, gw = grid_shape
    if h % gh or w % gw:
        raise ValueError(f"mask size {h}x{w} is not an integer multiple of grid {gh}x{gw}")
    attn = F.avg_pool2d(mask[:, None], kernel_size=(h // gh, w // gw))[:, 0]
    return attn[0] if squeeze else attn


def mask_guided_pool(grid: torch.Tensor, attn: torch.Tensor | None) -> torch.Tensor:
    """Attention-weighted mean of grid cells (B x D x gh x gw -> B x D).

    ``attn=None`` or an all-zero attention map gives the plain global average.
    """
    mean = grid.mean(dim=(-2, -1))
    if attn is None:
        return mean
    if attn.shape[-2:] != grid.shape[-2:]:
        raise ValueError(f"attention shape {tuple(attn.shape[-2:])} != grid shape {tuple(grid.shape[-2:])}")
    attn = attn.to(grid.dtype)
    total = attn.sum(dim=(-2, -1))
    weighted = (grid * attn[:, None]).sum(dim=(-2, -1)) / (total[:, None] + POOL_EPS)
    return torch.where((total > 0)[:, None], weighted, mean)


class ClassifierHead(nn.Module):
    """D -> D/2 -> 3 fully connected head."""

    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        hidden = max(cfg.embed_dim // 2, 1)
        self.net = nn.Sequential(
            nn.Linear(cfg.embed_dim, hidden), make_activation(cfg.activation), nn.Linear(hidden, NUM_CLASSES)
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.net(v)


def classify(head: ClassifierHead, v: torch.Tensor) -> torch.Tensor:
    """Class probabilities for pooled features ``v``."""
    return torch.softmax(head(v), dim=-1)
