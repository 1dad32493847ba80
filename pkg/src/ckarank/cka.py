"""Linear CKA between layer activations and regime classification."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .numerics import as_matrix, center_columns

DEFAULT_THRESHOLDS = (0.5, 0.7)
_RHO_SLACK = 1e-9


class Regime(str, enum.Enum):
    SHALLOW = "shallow"
    MIDDLE = "middle"
    DEEP = "deep"


@dataclass(frozen=True)
class RegimeLabel:
    label: Regime
    lower_threshold: float
    upper_threshold: float


@dataclass(frozen=True)
class CkaBreakdown:
    hsic_xy: float
    hsic_xx: float
    hsic_yy: float
    rho: float


@dataclass
class ActivationSet:
    """Per-layer activation matrices (n x p_l) for one input domain.

    Layers are addressed 1-based, matching how encoder depth is reported.
    """

    per_layer: list[np.ndarray]
    source_tag: str = ""

    def __post_init__(self):
        self.per_layer = [as_matrix(m) for m in self.per_layer]
        if not self.per_layer:
            raise ShapeError("activation set has no layers")
        n = self.per_layer[0].shape[0]
        for idx, m in enumerate(self.per_layer, start=1):
            if m.shape[0] != n:
                raise ShapeError(f"layer {idx} has {m.shape[0]} samples, expected {n}")

    @property
    def layer_count(self) -> int:
        return len(self.per_layer)

    @property
    def sample_count(self) -> int:
        return self.per_layer[0].shape[0]

    def layer(self, index: int) -> np.ndarray:
        return self.per_layer[index - 1]

    def take_rows(self, rows) -> "ActivationSet":
        return ActivationSet([m[rows] for m in self.per_layer], self.source_tag)


@dataclass
class CkaProfile:
    rho_per_layer: np.ndarray

    def __post_init__(self):
        self.rho_per_layer = np.asarray(self.rho_per_layer, dtype=np.float64)
        if self.rho_per_layer.ndim != 1 or self.rho_per_layer.size == 0:
            raise ShapeError("profile must be a non-empty vector")
        if np.any(self.rho_per_layer < -_RHO_SLACK) or np.any(self.rho_per_layer > 1 + _RHO_SLACK):
            raise ValueError("profile entries must lie in [0, 1]")

    def __len__(self):
        return self.rho_per_layer.size


@dataclass
class ProfileStats:
    mean_per_layer: np.ndarray
    std_per_layer: np.ndarray
    seed_count: int
    profiles: list = field(default_factory=list, repr=False)


def _hsic(a_c: np.ndarray, b_c: np.ndarray, n: int) -> float:
    # trace(K_a K_b) = ||b^T a||_F^2 for K = A A^T; biased (n-1)^-2 normalisation.
    cross = b_c.T @ a_c
    return float(np.sum(cross * cross)) / (n - 1) ** 2


def linear_cka(x, y) -> CkaBreakdown:
    """Linear CKA of two activation matrices sharing the same n samples (rows)."""
    x = as_matrix(x)
    y = as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    if n < 2:
        raise ShapeError("linear CKA needs at least two samples")
    xc = center_columns(x)
    yc = center_columns(y)
    hxy = _hsic(xc, yc, n)
    hxx = _hsic(xc, xc, n)
    hyy = _hsic(yc, yc, n)
    if hxx <= 0.0 or hyy <= 0.0:
        raise DegenerateInputError("activations are constant after centering")
    rho = hxy / np.sqrt(hxx * hyy)
    return CkaBreakdown(hsic_xy=hxy, hsic_xx=hxx, hsic_yy=hyy, rho=float(min(max(rho, 0.0), 1.0)))


def profile(source: ActivationSet, target: ActivationSet) -> CkaProfile:
    if source.layer_count != target.layer_count:
        raise ShapeError(
            f"layer counts differ: {source.layer_count} vs {target.layer_count}"
        )
    if source.sample_count != target.sample_count:
        raise ShapeError("source and target must have the same number of samples")
    return CkaProfile(
        [linear_cka(s, t).rho for s, t in zip(source.per_layer, target.per_layer)]
    )


def profile_stats(profiles) -> ProfileStats:
    profiles = list(profiles)
    if len(profiles) < 2:
        raise ShapeError("need at least two profiles")
    lengths = {len(p) for p in profiles}
    if len(lengths) != 1:
        raise ShapeError(f"profile lengths differ: {sorted(lengths)}")
    stack = np.stack([p.rho_per_layer for p in profiles])
    return ProfileStats(
        mean_per_layer=stack.mean(axis=0),
        std_per_layer=stack.std(axis=0, ddof=1),
        seed_count=len(profiles),
        profiles=profiles,
    )


def classify_regimes(prof: CkaProfile, lower: float = DEFAULT_THRESHOLDS[0],
                     upper: float = DEFAULT_THRESHOLDS[1]) -> list[RegimeLabel]:
    """Label each layer Shallow (rho < lower), Middle, or Deep (rho >= upper)."""
    if not 0.0 <= lower < upper <= 1.0:
        raise ValueError(f"thresholds must satisfy 0 <= lower < upper <= 1, got ({lower}, {upper})")
    labels = []
    for rho in prof.rho_per_layer:
        if rho < lower:
            regime = Regime.SHALLOW
        elif rho < upper:
            regime = Regime.MIDDLE
        else:
            regime = Regime.DEEP
        labels.append(RegimeLabel(regime, lower, upper))
    return labels


def regime_means(prof: CkaProfile, labels) -> dict:
    """Mean rho per regime over the layers carrying that label."""
    out = {}
    for regime in Regime:
        vals = [r for r, lab in zip(prof.rho_per_layer, labels) if lab.label is regime]
        if vals:
            out[regime] = float(np.mean(vals))
    return out
