"""The joint segmentation/classification network for the three variants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .classifier import ClassifierHead, classify, mask_guided_pool, mask_to_attention
from .core import RunConfig, Sample, as_image
from .data import merge_masks
from .decoders import build_decoder
from .encoder import build_encoder, encode


@dataclass
class ForwardOutput:
    mask_logits: torch.Tensor  # B x H x W
    mask_probs: torch.Tensor  # B x H x W
    class_probs: torch.Tensor  # B x 3
    pooled: torch.Tensor  # B x D
    grid: torch.Tensor  # B x D x g x g


class MultiTaskNet(nn.Module):
    """Encoder shared by a mask decoder and a classification head.

    ``unet-h`` and ``mgc-a`` use the U-Net head, ``sd-h`` the simple head.
    Only ``mgc-a`` pools encoder features with mask-derived attention; the
    other variants use plain global average pooling and ignore masks.
    """

    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg, with_skips=cfg.decoder == "unet")
        self.decoder = build_decoder(cfg)
        self.head = ClassifierHead(cfg)
        if not cfg.train_encoder:
            self.encoder.requires_grad_(False)

    def forward(
        self,
        images: torch.Tensor,
        attention_masks: torch.Tensor | None = None,
        mask_grad: bool = False,
        grid: torch.Tensor | None = None,
    ) -> ForwardOutput:
        """Run both branches.

        ``attention_masks`` (B x H x W) feeds the attention path when given;
        otherwise the predicted probabilities do, detached unless ``mask_grad``.
        ``grid`` replaces the encoder bottleneck with precomputed embeddings.
        """
        enc_grid, skips = encode(self.encoder, images)
        if grid is not None:
            if grid.shape != enc_grid.shape:
                raise ValueError(f"embedding grid {tuple(grid.shape)} != encoder grid {tuple(enc_grid.shape)}")
            enc_grid = grid
        logits = self.decoder(enc_grid, skips)
        probs = torch.sigmoid(logits)
        if self.cfg.mask_guided:
            if attention_masks is None:
                attention_masks = probs if mask_grad else probs.detach()
            attn = mask_to_attention(attention_masks.to(enc_grid.dtype), enc_grid.shape[-2:])
            pooled = mask_guided_pool(enc_grid, attn)
        else:
            pooled = mask_guided_pool(enc_grid, None)
        return ForwardOutput(logits, probs, classify(self.head, pooled), pooled, enc_grid)

    def classify_with_mask(self, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Class probabilities when the attention path is fed ``masks``."""
        return self.forward(images, attention_masks=masks).class_probs


def build_model(cfg: RunConfig) -> MultiTaskNet:
    """Construct a model with parameters initialized from ``cfg.seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(cfg.seed)
        return MultiTaskNet(cfg)
    finally:
        torch.random.set_rng_state(state)


def to_batch(samples: Sequence[Sample], cfg: RunConfig, dtype: torch.dtype = torch.float32
             ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into (images B x C x H x W, merged masks B x H x W, labels B)."""
    images, masks, labels = [], [], []
    for s in samples:
        img = as_image(s.image, cfg.channels)
        if img.shape[:2] != (cfg.working_resolution, cfg.working_resolution):
            raise ValueError(f"{s.id}: image {img.shape[:2]} is not at working resolution {cfg.working_resolution}")
        images.append(np.transpose(img, (2, 0, 1)))
        masks.append(merge_masks(s.masks, shape=img.shape[:2]))
        labels.append(s.label.index)
    return (
        torch.as_tensor(np.stack(images), dtype=dtype),
        torch.as_tensor(np.stack(masks), dtype=dtype),
        torch.as_tensor(labels, dtype=torch.long),
    )


@torch.no_grad()
def predict_arrays(model: MultiTaskNet, images: np.ndarray, batch_size: int = 8
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inference on B x C x H x W images: (mask probs, class probs, pooled features)."""
    model.eval()
    masks, probs, pooled = [], [], []
    dtype = next(model.parameters()).dtype
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size], dtype=dtype)
        out = model(x)
        masks.append(out.mask_probs.double().numpy())
        probs.append(out.class_probs.double().numpy())
        pooled.append(out.pooled.double().numpy())
    return np.concatenate(masks), np.concatenate(probs), np.concatenate(pooled)
