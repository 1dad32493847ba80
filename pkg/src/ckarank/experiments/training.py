"""Backbone pretraining, adapter training and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from ..allocation import RankPlan
from ..encoder import DTYPE, Encoder, EncoderConfig, build_encoder
from ..errors import NaNLossError, PretrainingFailedError
from ..fusion_loss import LossWeights, boundary_f1, miou, sobel_edges, total_loss
from .data import Dataset, SyntheticTaskConfig, generate_dataset
from .model import SegHead, SegModel
from .optim import AdamWState, TrainConfig, optimizer_step

log = logging.getLogger(__name__)

PRETRAIN_THRESHOLD = 0.9
# Experiments train in float32 for speed; every tensor is created in float64 first.
TRAIN_DTYPE = torch.float32
PRETRAIN_CONFIG = TrainConfig(epochs=30, batch_size=32, learning_rate=2e-3, weight_decay=0.01, seeds=(0,))


@dataclass(frozen=True)
class SegMetrics:
    miou: float
    boundary_f1: float
    miou_transparent: float = float("nan")


@dataclass
class Backbone:
    """Frozen pretrained encoder weights plus the segmentation head."""

    cfg: EncoderConfig
    encoder_state: dict
    head_state: dict
    source_miou: float = float("nan")

    def encoder(self) -> Encoder:
        enc = build_encoder(self.cfg, backbone_state=self.encoder_state)
        enc.freeze_backbone()
        return enc

    def head(self) -> SegHead:
        head = SegHead(self.cfg, seed=0)
        head.load_state_dict(self.head_state)
        head.requires_grad_(False)
        return head


@dataclass
class TrainResult:
    model: SegModel
    history: list = field(default_factory=list)
    final: SegMetrics | None = None


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def _tensors(ds: Dataset, dtype=DTYPE):
    return (torch.as_tensor(ds.images, dtype=dtype),
            torch.as_tensor(ds.depth, dtype=dtype),
            torch.as_tensor(ds.masks, dtype=dtype))


def predict(model: SegModel, ds: Dataset, batch_size: int = 128) -> np.ndarray:
    images, depth, _ = _tensors(ds, _dtype(model))
    out = []
    with torch.no_grad():
        for s in range(0, len(ds), batch_size):
            logits = model(images[s:s + batch_size], depth[s:s + batch_size] if model.use_depth else None)
            out.append((logits > 0).to(torch.uint8).numpy())
    return np.concatenate(out)


def evaluate(model: SegModel, ds: Dataset, tol_px: int = 2) -> SegMetrics:
    pred = predict(model, ds)
    transp = ds.transparent
    m_t = miou(pred[transp], ds.masks[transp]) if transp.any() else float("nan")
    return SegMetrics(miou=miou(pred, ds.masks), boundary_f1=boundary_f1(pred, ds.masks, tol_px),
                      miou_transparent=m_t)


def _run_epochs(model, params, train: Dataset, cfg: TrainConfig, weights: LossWeights, seed: int,
                eval_ds: Dataset | None, on_epoch=None, cosine: bool = False):
    images, depth, masks = _tensors(train, _dtype(model))
    edges = torch.as_tensor(sobel_edges(train.masks, weights.edge_width))
    gen = torch.Generator().manual_seed(int(seed))
    state = AdamWState()
    history = []
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        sums = {"dice": 0.0, "bce": 0.0, "edge": 0.0, "total": 0.0}
        batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = model(images[idx], depth[idx] if model.use_depth else None)
            terms = total_loss(torch.sigmoid(logits), masks[idx], weights, edges=edges[idx])
            if not math.isfinite(terms.total.item()):
                raise NaNLossError(epoch, b, terms.as_floats())
            grads = torch.autograd.grad(terms.total, params, allow_unused=True)
            step_cfg = cfg
            if cosine:
                frac = state.step / total_steps
                step_cfg = replace(cfg, learning_rate=cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * frac)))
            optimizer_step(params, grads, step_cfg, state)
            for k, v in terms.as_floats().items():
                sums[k] += v
            batches += 1
        row = {"epoch": epoch, **{f"loss_{k}": v / batches for k, v in sums.items()}}
        if eval_ds is not None:
            met = evaluate(model, eval_ds)
            row.update(miou=met.miou, boundary_f1=met.boundary_f1)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history


def pretrain_frozen_backbone(enc_cfg: EncoderConfig, task: SyntheticTaskConfig,
                             train_cfg: TrainConfig | None = None, n_train: int = 4096,
                             n_heldout: int = 256, threshold: float = PRETRAIN_THRESHOLD) -> Backbone:
    """Fit encoder and head on clean Source scenes, then return them frozen."""
    train_cfg = train_cfg or PRETRAIN_CONFIG
    source = task.as_source()
    train = generate_dataset(source, n_train)
    heldout = generate_dataset(source, n_heldout, offset=n_train)
    enc = build_encoder(enc_cfg)
    head = SegHead(enc_cfg, seed=enc_cfg.seed + 1)
    model = SegModel(enc, head, use_depth=False).to(TRAIN_DTYPE)
    params = [p for p in model.parameters()]
    _run_epochs(model, params, train, train_cfg, LossWeights(lambda_edge=0.0), enc_cfg.seed, None,
                on_epoch=lambda r: log.debug("pretrain epoch %d loss %.4f", r["epoch"], r["loss_total"]),
                cosine=True)
    met = evaluate(model, heldout)
    if met.miou < threshold:
        raise PretrainingFailedError(met.miou, threshold)
    enc_state = {k: v.detach().to(DTYPE).clone() for k, v in enc.state_dict().items()}
    head_state = {k: v.detach().to(DTYPE).clone() for k, v in head.state_dict().items()}
    return Backbone(enc_cfg, enc_state, head_state, source_miou=met.miou)


def build_model(backbone: Backbone, plan: RankPlan | None, seed: int, use_depth: bool = True,
                dtype: torch.dtype = TRAIN_DTYPE) -> SegModel:
    """Frozen backbone + adapters from ``plan`` (+ depth stream); initialised in float64."""
    enc = backbone.encoder()
    if plan is not None:
        enc.attach_adapters(plan, seed)
    return SegModel(enc, backbone.head(), use_depth=use_depth, seed=seed).to(dtype)


def train_adapters(model: SegModel, train: Dataset, cfg: TrainConfig, weights: LossWeights, seed: int,
                   eval_ds: Dataset | None = None) -> TrainResult:
    """Optimise every trainable tensor of ``model`` (adapters, depth stream, fusion)."""
    params = [p for _, p in model.trainable()]
    history = _run_epochs(model, params, train, cfg, weights, seed, eval_ds)
    final = evaluate(model, eval_ds) if eval_ds is not None else None
    return TrainResult(model=model, history=history, final=final)
