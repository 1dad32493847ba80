"""Gated depth fusion, segmentation losses with edge supervision, and metrics.

Fusion and losses operate on torch tensors so they can be differentiated;
edge extraction and metrics are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from torch import nn
from torch.nn import functional as F

from .errors import NumericError, ShapeError

DTYPE = torch.float64
PROB_CLAMP = 1e-7
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


class FusionParams(nn.Module):
    """``W_f [F_rgb; F_d] + g * F_d`` with ``g = sigmoid(MLP([F_rgb; F_d]))``.

    Features are channel-last: (..., width). The gate is per location and
    per channel.
    """

    def __init__(self, rgb_width: int, depth_width: int, seed: int = 0, gate_bias: float = 0.0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        cat = rgb_width + depth_width
        self.rgb_width = rgb_width
        self.depth_width = depth_width
        # Identity on the RGB block so an untrained fusion passes RGB features through.
        w_f = torch.zeros(depth_width, cat, dtype=DTYPE)
        w_f[:, :rgb_width] = torch.eye(depth_width, rgb_width, dtype=DTYPE)
        self.w_f = nn.Parameter(w_f)
        self.b_f = nn.Parameter(torch.zeros(depth_width, dtype=DTYPE))
        bound = 1.0 / np.sqrt(cat)
        self.gate_w1 = nn.Parameter((torch.rand(depth_width, cat, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.gate_b1 = nn.Parameter(torch.zeros(depth_width, dtype=DTYPE))
        bound = 1.0 / np.sqrt(depth_width)
        self.gate_w2 = nn.Parameter((torch.rand(depth_width, depth_width, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.gate_b2 = nn.Parameter(torch.full((depth_width,), float(gate_bias), dtype=DTYPE))

    @property
    def out_width(self) -> int:
        return self.depth_width

    def gate(self, cat: torch.Tensor) -> torch.Tensor:
        hidden = F.gelu(F.linear(cat, self.gate_w1, self.gate_b1))
        return torch.sigmoid(F.linear(hidden, self.gate_w2, self.gate_b2))

    def forward(self, f_rgb, f_d):
        return fuse(f_rgb, f_d, self)


def fuse(f_rgb: torch.Tensor, f_d: torch.Tensor, params: FusionParams) -> torch.Tensor:
    if f_rgb.shape[:-1] != f_d.shape[:-1]:
        raise ShapeError(f"spatial dims differ: {tuple(f_rgb.shape)} vs {tuple(f_d.shape)}")
    if f_rgb.shape[-1] != params.rgb_width or f_d.shape[-1] != params.depth_width:
        raise ShapeError(
            f"channel widths ({f_rgb.shape[-1]}, {f_d.shape[-1]}) do not match "
            f"fusion ({params.rgb_width}, {params.depth_width})"
        )
    cat = torch.cat([f_rgb, f_d], dim=-1)
    return F.linear(cat, params.w_f, params.b_f) + params.gate(cat) * f_d


@dataclass(frozen=True)
class LossWeights:
    lambda_edge: float = 0.5
    dice_smooth: float = 1.0
    edge_width: int = 2

    def __post_init__(self):
        if not np.isfinite(self.lambda_edge) or self.lambda_edge < 0:
            raise ValueError("lambda_edge must be finite and >= 0")


@dataclass
class LossTerms:
    dice: torch.Tensor
    bce: torch.Tensor
    edge: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("dice", "bce", "edge", "total")}


def _check_shapes(pred, target):
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


def dice_loss(pred, target, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss over all pixels of the batch."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def _bce_map(pred, target):
    p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def bce_loss(pred, target) -> torch.Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes(pred, target)
    return _bce_map(pred, target).mean()


def sobel_edges(mask, width: int = 2) -> np.ndarray:
    """Boolean edge band of a binary mask.

    The base band holds every pixel with nonzero Sobel magnitude plus every
    pixel whose 3x3 neighbourhood contains the other label (an isolated
    pixel has zero Sobel response at its own centre). Across a straight step
    the base band is two pixels wide; ``width > 2`` dilates it symmetrically.
    Accepts (H, W) or a stack (..., H, W).
    """
    if width < 1:
        raise ValueError("edge width must be >= 1")
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim > 2:
        flat = m.reshape(-1, *m.shape[-2:])
        return np.stack([sobel_edges(x, width) for x in flat]).reshape(m.shape)
    # Replicated borders: the frame edge is not an object boundary.
    gx = ndimage.correlate(m, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(m, SOBEL_X.T, mode="nearest")
    band = (np.hypot(gx, gy) > 0) | _inner_band(m)
    extra = (width - 1) // 2
    if extra:
        band = ndimage.binary_dilation(band, structure=np.ones((3, 3), bool), iterations=extra)
    return band


def _inner_band(m: np.ndarray) -> np.ndarray:
    """Pixels with an 8-neighbour of different value inside the frame."""
    padded = np.pad(m, 1, mode="edge")
    h, w = m.shape
    out = np.zeros(m.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                out |= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] != m
    return out


def edge_loss(pred, target_mask, width: int = 2, edges=None) -> torch.Tensor:
    """Mean BCE over the Sobel edge band of the ground-truth mask (0 if the band is empty)."""
    pred, target = _as_tensor(pred), _as_tensor(target_mask)
    _check_shapes(pred, target)
    band = edges if edges is not None else sobel_edges(target.detach().numpy(), width)
    band = torch.as_tensor(np.asarray(band, dtype=bool))
    if not band.any():
        return pred.sum() * 0.0
    return _bce_map(pred[band], target[band]).mean()


def total_loss(pred, target, weights: LossWeights = LossWeights(), edges=None) -> LossTerms:
    pred, target = _as_tensor(pred), _as_tensor(target)
    d = dice_loss(pred, target, weights.dice_smooth)
    b = bce_loss(pred, target)
    e = edge_loss(pred, target, weights.edge_width, edges=edges)
    return LossTerms(dice=d, bce=b, edge=e, total=d + b + weights.lambda_edge * e)


# -- metrics ------------------------------------------------------------


def miou(pred_mask, target_mask, class_count: int = 2) -> float:
    """Mean IoU over non-background classes, accumulated over all given pixels."""
    pred = np.asarray(pred_mask)
    target = np.asarray(target_mask)
    _check_shapes(pred, target)
    ious = []
    for c in range(1, class_count):
        p = pred == c
        t = target == c
        union = np.count_nonzero(p | t)
        if union == 0:
            continue
        ious.append(np.count_nonzero(p & t) / union)
    if not ious:
        raise NumericError("no non-background class present in prediction or target")
    return float(np.mean(ious))


def mask_boundary(mask) -> np.ndarray:
    """Pixels of the foreground that touch background (8-neighbourhood, frame edge excluded)."""
    m = np.asarray(mask).astype(bool)
    return m & _inner_band(m.astype(np.int8))


def boundary_counts(pred_mask, target_mask, tol_px: int = 2) -> tuple[int, int, int, int]:
    """(matched predicted, predicted, matched true, true) boundary pixel counts."""
    if tol_px < 0:
        raise ValueError("tol_px must be >= 0")
    pb = mask_boundary(pred_mask)
    tb = mask_boundary(target_mask)
    size = 2 * tol_px + 1
    near_t = ndimage.maximum_filter(tb.astype(np.uint8), size=size, mode="constant") > 0
    near_p = ndimage.maximum_filter(pb.astype(np.uint8), size=size, mode="constant") > 0
    return (int(np.count_nonzero(pb & near_t)), int(np.count_nonzero(pb)),
            int(np.count_nonzero(tb & near_p)), int(np.count_nonzero(tb)))


def _f1_from_counts(mp, np_, mt, nt) -> float:
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    precision = mp / np_
    recall = mt / nt
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_f1(pred_mask, target_mask, tol_px: int = 2) -> float:
    """Boundary F1 with Chebyshev matching tolerance; stacks are pooled (micro-averaged)."""
    pred = np.asarray(pred_mask)
    target = np.asarray(target_mask)
    _check_shapes(pred, target)
    if pred.ndim == 2:
        return _f1_from_counts(*boundary_counts(pred, target, tol_px))
    totals = np.zeros(4, dtype=np.int64)
    for p, t in zip(pred.reshape(-1, *pred.shape[-2:]), target.reshape(-1, *target.shape[-2:])):
        totals += boundary_counts(p, t, tol_px)
    return _f1_from_counts(*totals)
