"""Segmentation heads mapping the feature grid to full-resolution mask logits."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .core import RunConfig
from .encoder import conv_block, make_activation, make_norm, skip_channels


class UNetHead(nn.Module):
    """Transposed-conv decoder; each stage doubles resolution and concatenates a skip.

    Stage ``j`` pairs with ``skips[-1 - j]``, so the coarsest skip is consumed first.
    """

    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        chans = skip_channels(cfg)[::-1]  # decode order: coarse to fine
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        in_ch = cfg.embed_dim
        for ch in chans:
            self.up.append(nn.ConvTranspose2d(in_ch, ch, 2, stride=2))
            self.fuse.append(nn.Sequential(
                conv_block(2 * ch, ch, cfg.activation, cfg.norm),
                conv_block(ch, ch, cfg.activation, cfg.norm),
            ))
            in_ch = ch
        self.out = nn.Conv2d(in_ch, 1, 1)

    def forward(self, grid: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != len(self.up):
            raise ValueError(f"decoder has {len(self.up)} stages but got {len(skips)} skip levels")
        x = grid
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips)):
            x = up(x)
            if skip.shape[1] != x.shape[1]:
                raise ValueError(f"skip has {skip.shape[1]} channels, stage expects {x.shape[1]}")
            if skip.shape[-2:] != x.shape[-2:]:
                raise ValueError(f"skip size {tuple(skip.shape[-2:])} != stage size {tuple(x.shape[-2:])}")
            x = fuse(torch.cat([x, skip], dim=1))
        return self.out(x)[:, 0]


class SimpleHead(nn.Module):
    """Three 3x3 conv blocks on the grid, one bilinear upsample, a 1x1 conv."""

    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        ch = cfg.decoder_width * 4
        self.scale = cfg.patch_size
        self.convs = nn.Sequential(
            conv_block(cfg.embed_dim, ch, cfg.activation, cfg.norm),
            conv_block(ch, ch, cfg.activation, cfg.norm),
            conv_block(ch, ch, cfg.activation, cfg.norm),
        )
        self.out = nn.Conv2d(ch, 1, 1)

    def forward(self, grid: torch.Tensor, skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        x = self.convs(grid)
        x = F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)
        return self.out(x)[:, 0]


def build_decoder(cfg: RunConfig) -> nn.Module:
    return SimpleHead(cfg) if cfg.decoder == "simple" else UNetHead(cfg)


def decode_unet(head: UNetHead, grid: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
    return head(grid, skips)


def decode_simple(head: SimpleHead, grid: torch.Tensor) -> torch.Tensor:
    return head(grid)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def n_stages(patch_size: int) -> int:
    return int(math.log2(patch_size))
