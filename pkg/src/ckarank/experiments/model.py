"""Segmentation model: LoRA encoder, optional depth stream with gated fusion, frozen head."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from ..encoder import DTYPE, Encoder, EncoderConfig
from ..fusion_loss import FusionParams


class DepthEncoder(nn.Module):
    """Three-layer conv stack mapping a depth map to the token grid.

    The first layer stays frozen. The last layer starts at zero so the depth
    features are zero before training.
    """

    def __init__(self, cfg: EncoderConfig, out_width: int, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.patch = cfg.patch_size
        self.conv1 = nn.Conv2d(1, 8, 3, padding=1, dtype=DTYPE)
        self.conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1, dtype=DTYPE)
        self.conv3 = nn.Conv2d(16, out_width, 3, stride=max(cfg.patch_size // 2, 1), padding=1, dtype=DTYPE)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1)
                                  * (3.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            self.conv3.weight.zero_()
            self.conv3.bias.zero_()
        self.conv1.requires_grad_(False)

    def forward(self, depth: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.conv1(depth))
        h = F.gelu(self.conv2(h))
        h = self.conv3(h)
        return h.flatten(2).transpose(1, 2)   # (B, tokens, width)


class SegHead(nn.Module):
    """Per-token linear map to a patch of pixel logits."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        p2 = cfg.patch_size ** 2
        bound = 1.0 / cfg.d_model ** 0.5
        self.weight = nn.Parameter((torch.rand(p2, cfg.d_model, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.bias = nn.Parameter(torch.zeros(p2, dtype=DTYPE))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        g, p = cfg.grid, cfg.patch_size
        logits = F.linear(tokens, self.weight, self.bias)
        logits = logits.view(-1, g, g, p, p).permute(0, 1, 3, 2, 4)
        return logits.reshape(-1, cfg.image_size, cfg.image_size)


class SegModel(nn.Module):
    def __init__(self, encoder: Encoder, head: SegHead, use_depth: bool = True, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.use_depth = use_depth
        # Ablation switch: keep the depth stream and fusion but feed them an all-zero map.
        self.zero_depth = False
        d = encoder.cfg.d_model
        if use_depth:
            self.depth_encoder = DepthEncoder(encoder.cfg, d, seed)
            self.fusion = FusionParams(d, d, seed=seed + 1)
        else:
            self.depth_encoder = None
            self.fusion = None

    def forward(self, images: torch.Tensor, depth: torch.Tensor | None = None) -> torch.Tensor:
        feats, _ = self.encoder(images)
        if self.use_depth:
            if self.zero_depth:
                depth = torch.zeros_like(depth)
            feats = self.fusion(feats, self.depth_encoder(depth))
        return self.head(feats)

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def extras_count(self) -> int:
        """Trainable parameters outside the encoder adapters."""
        return sum(p.numel() for n, p in self.trainable() if not n.startswith("encoder."))
