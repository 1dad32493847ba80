"""Small ViT-style encoder with frozen weights and LoRA adapters on Q/K/V/O."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .allocation import PROJECTIONS, EncoderDims, RankPlan, count_trainable_params
from .cka import ActivationSet
from .errors import ConfigurationError, ShapeError

DTYPE = torch.float64
LORA_INIT_STD = 0.02
LORA_ALPHA_PER_RANK = 2.0
MLP_RATIO = 4


@dataclass(frozen=True)
class EncoderConfig:
    layer_count: int = 8
    d_model: int = 32
    head_count: int = 4
    patch_size: int = 4
    image_size: int = 32
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.head_count:
            raise ConfigurationError("d_model must be divisible by head_count")
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be divisible by patch_size")
        if self.layer_count < 1:
            raise ConfigurationError("layer_count must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def dims(self) -> EncoderDims:
        return EncoderDims(d_model=self.d_model, layer_count=self.layer_count)

    def to_dict(self) -> dict:
        return asdict(self)


class LoraAdapter(nn.Module):
    """Trainable update ``(alpha / r) * B @ A`` with A (r x d_in) and B (d_out x r)."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1:
            raise ShapeError("adapter rank must be >= 1")
        self.rank = rank
        self.alpha = float(LORA_ALPHA_PER_RANK * rank if alpha is None else alpha)
        a = torch.randn(rank, d_in, generator=generator, dtype=DTYPE) * LORA_INIT_STD
        self.a = nn.Parameter(a)
        self.b = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.b @ self.a)


def adapted_projection(w_frozen: torch.Tensor, adapter: LoraAdapter | None, x: torch.Tensor,
                       bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ W^T + scaling * (x @ A^T) @ B^T`` for a batch of row vectors ``x``."""
    out = F.linear(x, w_frozen, bias)
    if adapter is None:
        return out
    if adapter.a.shape[0] != adapter.b.shape[1]:
        raise ShapeError(
            f"adapter factors disagree on rank: A has {adapter.a.shape[0]}, B has {adapter.b.shape[1]}"
        )
    if adapter.a.shape[1] != w_frozen.shape[1] or adapter.b.shape[0] != w_frozen.shape[0]:
        raise ShapeError("adapter factors do not match the projection shape")
    return out + adapter.scaling * F.linear(F.linear(x, adapter.a), adapter.b)


def _frozen(t: torch.Tensor) -> nn.Parameter:
    return nn.Parameter(t, requires_grad=False)


def _init_linear(d_out: int, d_in: int, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    bound = 1.0 / math.sqrt(d_in)
    w = (torch.rand(d_out, d_in, generator=gen, dtype=DTYPE) * 2 - 1) * bound
    return w, torch.zeros(d_out, dtype=DTYPE)


class Block(nn.Module):
    """Pre-norm transformer block; LoRA sits on the four attention projections."""

    def __init__(self, cfg: EncoderConfig, gen: torch.Generator):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.head_count
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        for name in PROJECTIONS:
            w, b = _init_linear(d, d, gen)
            self.register_parameter(f"w_{name}", nn.Parameter(w))
            self.register_parameter(f"b_{name}", nn.Parameter(b))
        w1, b1 = _init_linear(MLP_RATIO * d, d, gen)
        w2, b2 = _init_linear(d, MLP_RATIO * d, gen)
        self.w_fc1, self.b_fc1 = nn.Parameter(w1), nn.Parameter(b1)
        self.w_fc2, self.b_fc2 = nn.Parameter(w2), nn.Parameter(b2)
        self.adapters = nn.ModuleDict()

    def proj(self, name: str, x: torch.Tensor) -> torch.Tensor:
        return adapted_projection(getattr(self, f"w_{name}"), self.adapters[name] if name in self.adapters else None,
                                  x, getattr(self, f"b_{name}"))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bsz, n, d = x.shape
        h = self.norm1(x)
        split = lambda t: t.view(bsz, n, self.heads, d // self.heads).transpose(1, 2)  # noqa: E731
        q, k, v = (split(self.proj(p, h)) for p in "qkv")
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads), dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(bsz, n, d)
        x = x + self.proj("o", ctx)
        h = self.norm2(x)
        return x + F.linear(F.gelu(F.linear(h, self.w_fc1, self.b_fc1)), self.w_fc2, self.b_fc2)


class Encoder(nn.Module):
    """Patch embedding, ``layer_count`` blocks and a final LayerNorm.

    ``forward`` returns the final token features (B, T, d) and the list of
    per-block residual-stream outputs.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        w, b = _init_linear(cfg.d_model, cfg.patch_dim, gen)
        self.w_patch, self.b_patch = nn.Parameter(w), nn.Parameter(b)
        self.pos = nn.Parameter(torch.randn(cfg.token_count, cfg.d_model, generator=gen, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg, gen) for _ in range(cfg.layer_count))
        self.norm = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.plan: RankPlan | None = None

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.ndim != 4 or tuple(images.shape[1:]) != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(images.shape)}"
            )
        p, g = cfg.patch_size, cfg.grid
        x = images.reshape(images.shape[0], cfg.in_channels, g, p, g, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(images.shape[0], g * g, cfg.patch_dim)

    def forward(self, images: torch.Tensor):
        x = F.linear(self.patchify(images), self.w_patch, self.b_patch) + self.pos
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return self.norm(x), outs

    # -- adapters -------------------------------------------------------

    def frozen_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if ".adapters." not in n]

    def adapter_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if ".adapters." in n]

    def freeze_backbone(self):
        for _, p in self.frozen_parameters():
            p.requires_grad_(False)

    def attach_adapters(self, plan: RankPlan, seed: int):
        if len(plan) != self.cfg.layer_count:
            raise ShapeError(f"plan has {len(plan)} layers, encoder has {self.cfg.layer_count}")
        gen = torch.Generator().manual_seed(seed)
        d = self.cfg.d_model
        for block, rank in zip(self.blocks, plan.per_layer_rank):
            block.adapters = nn.ModuleDict(
                {name: LoraAdapter(d, d, rank, generator=gen) for name in PROJECTIONS}
            )
        self.plan = plan
        self.freeze_backbone()

    def detach_adapters(self):
        for block in self.blocks:
            block.adapters = nn.ModuleDict()
        self.plan = None


def build_encoder(cfg: EncoderConfig, plan: RankPlan | None = None, adapter_seed: int | None = None,
                  backbone_state: dict | None = None) -> Encoder:
    """Construct an encoder, optionally loading frozen weights and attaching adapters."""
    enc = Encoder(cfg)
    if backbone_state is not None:
        enc.load_state_dict(backbone_state, strict=True)
    if plan is not None:
        enc.attach_adapters(plan, cfg.seed if adapter_seed is None else adapter_seed)
        expected = count_trainable_params(plan, cfg.dims)
        got = trainable_parameters(enc)[1]
        if got != expected:
            raise ShapeError(f"adapter parameter count {got} != closed form {expected}")
    return enc


def encoder_forward(enc: Encoder, images, batch_size: int = 256, source_tag: str = ""):
    """Run the encoder without gradients.

    Returns an ActivationSet of mean-pooled block outputs (one row per image)
    and the final token features as an array of shape (n, tokens, d_model).
    """
    images = torch.as_tensor(np.asarray(images), dtype=DTYPE)
    pooled = [[] for _ in range(enc.cfg.layer_count)]
    finals = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats, outs = enc(images[start:start + batch_size])
            finals.append(feats.numpy())
            for i, o in enumerate(outs):
                pooled[i].append(o.mean(dim=1).numpy())
    acts = ActivationSet([np.concatenate(p) for p in pooled], source_tag=source_tag)
    return acts, np.concatenate(finals)


def trainable_parameters(enc: Encoder):
    """Flat copy of the adapter factors and their total count."""
    params = [p for _, p in enc.adapter_parameters()]
    if not params:
        return torch.zeros(0, dtype=DTYPE), 0
    flat = torch.cat([p.detach().reshape(-1) for p in params])
    return flat, int(flat.numel())


def frozen_weight_hash(module: nn.Module) -> str:
    """SHA-256 over every non-adapter tensor, in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        if ".adapters." in name:
            continue
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
