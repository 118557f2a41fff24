"""Shared image encoder and the precomputed-embedding file format.

Two stand-ins are available: a small patch-embedding transformer and a
four-stage convolutional encoder. Both return the bottleneck feature grid
(B x D x g x g, with g = resolution / patch) and, when skips are enabled, a
skip stack ordered finest first and coarsest last.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import RunConfig

EMBEDDING_MAGIC = b"BUSE"


def make_activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(0.01)
    if name == "gelu":
        return nn.GELU()
    raise ValueError(f"unknown activation: {name}")


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return nn.GroupNorm(math.gcd(8, channels), channels)


def conv_block(in_ch: int, out_ch: int, act: str, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        make_norm(norm, out_ch),
        make_activation(act),
    )


def skip_channels(cfg: RunConfig) -> list[int]:
    """Channel count of each skip level, finest first."""
    levels = int(math.log2(cfg.patch_size))
    return [cfg.decoder_width * 2 ** j for j in range(levels)]


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    """Patch embedding followed by pre-norm transformer blocks.

    Skip features are taken from evenly spaced block outputs and brought to
    2x, 4x, ... of the grid size with chains of stride-2 transposed convs;
    the shallowest block feeds the finest level.
    """

    def __init__(self, cfg: RunConfig, with_skips: bool) -> None:
        super().__init__()
        d, g = cfg.embed_dim, cfg.grid_size
        self.grid_size = g
        self.patch_embed = nn.Conv2d(cfg.channels, d, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, g * g, d) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.skip_depths: list[int] = []
        self.skip_proj = nn.ModuleList()
        if with_skips:
            chans = skip_channels(cfg)
            levels = len(chans)
            self.skip_depths = [int(round(x)) for x in np.linspace(0, cfg.depth - 1, levels)]
            for j, ch in enumerate(chans):
                n_up = levels - j  # finest level needs the most doublings
                layers: list[nn.Module] = [nn.ConvTranspose2d(d, ch, 2, stride=2)]
                for _ in range(n_up - 1):
                    layers += [make_norm(cfg.norm, ch), make_activation(cfg.activation),
                               nn.ConvTranspose2d(ch, ch, 2, stride=2)]
                self.skip_proj.append(nn.Sequential(*layers))

    def _to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, d = tokens.shape
        return tokens.transpose(1, 2).reshape(b, d, self.grid_size, self.grid_size)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        taps: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in self.skip_depths:
                taps[i] = tokens
        grid = self._to_grid(self.norm(tokens))
        skips = [proj(self._to_grid(taps[depth])) for depth, proj in zip(self.skip_depths, self.skip_proj)]
        return grid, skips


class ConvEncoder(nn.Module):
    """Stride-2 convolutional pyramid; each stage output is a skip level."""

    def __init__(self, cfg: RunConfig, with_skips: bool) -> None:
        super().__init__()
        self.with_skips = with_skips
        chans = skip_channels(cfg)
        self.stages = nn.ModuleList()
        in_ch = cfg.channels
        for j, ch in enumerate(chans):
            stride = 1 if j == 0 else 2
            self.stages.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, 3, stride=stride, padding=1),
                make_norm(cfg.norm, ch), make_activation(cfg.activation),
                conv_block(ch, ch, cfg.activation, cfg.norm),
            ))
            in_ch = ch
        self.bottleneck = nn.Sequential(
            nn.Conv2d(in_ch, cfg.embed_dim, 3, stride=2, padding=1),
            make_norm(cfg.norm, cfg.embed_dim), make_activation(cfg.activation),
            nn.Conv2d(cfg.embed_dim, cfg.embed_dim, 1),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return self.bottleneck(x), (skips if self.with_skips else [])


def build_encoder(cfg: RunConfig, with_skips: bool) -> nn.Module:
    if cfg.encoder == "conv":
        return ConvEncoder(cfg, with_skips)
    return ViTEncoder(cfg, with_skips)


def encode(encoder: nn.Module, images: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Forward ``images`` (B x C x H x W) through ``encoder``."""
    patch = getattr(encoder, "grid_size", None)
    h, w = images.shape[-2:]
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    if isinstance(encoder, ViTEncoder):
        stride = encoder.patch_embed.stride[0]
        if h % stride:
            raise ValueError(f"resolution {h} not divisible by patch size {stride}")
        if h // stride != patch:
            raise ValueError(f"resolution {h} does not match the encoder grid {patch}x{patch}")
    grid, skips = encoder(images)
    return grid, skips


def check_skip_stack(skips: list[torch.Tensor]) -> None:
    sizes = [s.shape[-1] for s in skips]
    if any(a <= b for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"skip levels must shrink from finest to coarsest, got sizes {sizes}")


# ---------------------------------------------------------------------------
# embedding files


def save_embeddings(path: str | Path, grid: np.ndarray) -> None:
    """Write an h x w x D grid as ``BUSE`` + u32 (h, w, D) + float32 payload."""
    arr = np.ascontiguousarray(grid, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"grid must be h x w x D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes())


def load_embeddings(path: str | Path, expected: tuple[int, int, int] | None = None) -> np.ndarray:
    """Read a ``BUSE`` embedding file into an h x w x D float32 array."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    h, w, d = struct.unpack("<3I", data[4:16])
    payload = data[16:]
    if len(payload) != 4 * h * w * d:
        raise ValueError(f"{path}: payload holds {len(payload) // 4} floats, header declares {h * w * d}")
    grid = np.frombuffer(payload, dtype="<f4").reshape(h, w, d).astype(np.float32)
    if not np.all(np.isfinite(grid)):
        raise ValueError(f"{path}: embedding contains non-finite values")
    if expected is not None and (h, w, d) != tuple(expected):
        raise ValueError(f"{path}: embedding shape {(h, w, d)} != expected {tuple(expected)}")
    return grid
