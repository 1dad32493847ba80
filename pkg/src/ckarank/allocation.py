"""Rank plans from CKA profiles, parameter accounting and the rank/similarity oracle."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .cka import CkaProfile, Regime, classify_regimes
from .errors import ConfigurationError, ShapeError

PROJECTIONS = ("q", "k", "v", "o")
PAPER_REGIME_RANKS = {Regime.SHALLOW: 16, Regime.MIDDLE: 8, Regime.DEEP: 4}
TOY_REGIME_RANKS = {Regime.SHALLOW: 8, Regime.MIDDLE: 4, Regime.DEEP: 2}


def _normalise_ranks(regime_ranks) -> dict:
    out = {}
    for key, value in dict(regime_ranks).items():
        out[Regime(key.value if isinstance(key, Regime) else str(key).lower())] = int(value)
    missing = [r.value for r in Regime if r not in out]
    if missing:
        raise ValueError(f"regime_ranks missing {missing}")
    if any(v < 1 for v in out.values()):
        raise ValueError("regime ranks must be >= 1")
    return out


@dataclass(frozen=True)
class EncoderDims:
    """Per-layer model width of the four square attention projections."""

    d_model: int
    layer_count: int


@dataclass
class RankPlan:
    per_layer_rank: list[int]
    thresholds: tuple = (0.5, 0.7)
    regime_ranks: dict = field(default_factory=dict)
    regimes: list = field(default_factory=list)
    rho: list | None = None
    total_trainable: int | None = None

    def __post_init__(self):
        self.per_layer_rank = [int(r) for r in self.per_layer_rank]
        if not self.per_layer_rank:
            raise ConfigurationError("rank plan covers no layers")
        if any(r < 1 for r in self.per_layer_rank):
            raise ConfigurationError("every layer needs rank >= 1")

    def __len__(self):
        return len(self.per_layer_rank)

    @classmethod
    def uniform(cls, rank: int, layer_count: int) -> "RankPlan":
        return cls([rank] * layer_count)

    def with_total(self, dims: EncoderDims, extras: int = 0) -> "RankPlan":
        self.total_trainable = count_trainable_params(self, dims, extras)
        return self


def allocate_ranks(prof: CkaProfile, thresholds=(0.5, 0.7), regime_ranks=None) -> RankPlan:
    """Assign each layer the rank of the regime its CKA value falls into."""
    ranks = _normalise_ranks(regime_ranks if regime_ranks is not None else PAPER_REGIME_RANKS)
    lower, upper = thresholds
    labels = classify_regimes(prof, lower, upper)
    return RankPlan(
        per_layer_rank=[ranks[lab.label] for lab in labels],
        thresholds=(float(lower), float(upper)),
        regime_ranks=ranks,
        regimes=[lab.label for lab in labels],
        rho=[float(r) for r in prof.rho_per_layer],
    )


def plan_from_boundaries(boundaries, regime_ranks, layer_count: int) -> RankPlan:
    """Plan with shallow layers ``1..b1``, middle ``b1+1..b2`` and deep the rest."""
    ranks = _normalise_ranks(regime_ranks)
    b1, b2 = boundaries
    if not 1 <= b1 < b2 < layer_count:
        raise ConfigurationError(
            f"boundaries {tuple(boundaries)} leave a regime empty for {layer_count} layers"
        )
    regimes = [Regime.SHALLOW] * b1 + [Regime.MIDDLE] * (b2 - b1) + [Regime.DEEP] * (layer_count - b2)
    return RankPlan([ranks[r] for r in regimes], regime_ranks=ranks, regimes=regimes)


def regime_boundaries(plan: RankPlan) -> tuple[int, int]:
    """Last shallow layer and last middle layer (1-based) of a contiguous plan."""
    regimes = plan.regimes
    if not regimes:
        raise ConfigurationError("plan carries no regime labels")
    order = [Regime.SHALLOW, Regime.MIDDLE, Regime.DEEP]
    idx = [order.index(r) for r in regimes]
    if idx != sorted(idx):
        raise ConfigurationError("regimes are not contiguous shallow->middle->deep")
    b1 = sum(1 for r in regimes if r is Regime.SHALLOW)
    b2 = b1 + sum(1 for r in regimes if r is Regime.MIDDLE)
    return b1, b2


def shift_boundaries(plan: RankPlan, shift: int) -> RankPlan:
    """Move every regime boundary ``shift`` layers deeper (negative = shallower).

    Layer l takes the regime label of layer ``l - shift``, with the first and
    last labels repeated at the edges. For a contiguous plan this moves both
    boundaries by ``shift``.
    """
    if not plan.regimes:
        raise ConfigurationError("plan carries no regime labels")
    n = len(plan)
    labels = [plan.regimes[min(max(i - shift, 0), n - 1)] for i in range(n)]
    empty = [r.value for r in Regime if r in plan.regimes and r not in labels]
    if empty:
        raise ConfigurationError(f"shift {shift} leaves regime(s) {empty} with no layers")
    return RankPlan([plan.regime_ranks[r] for r in labels], thresholds=plan.thresholds,
                    regime_ranks=plan.regime_ranks, regimes=labels)


def count_trainable_params(plan: RankPlan, dims: EncoderDims, extras: int = 0) -> int:
    """LoRA parameters on Q/K/V/O of every layer plus ``extras``.

    Each square projection of width d carries A (r x d) and B (d x r).
    """
    if len(plan) != dims.layer_count:
        raise ShapeError(f"plan has {len(plan)} layers, encoder has {dims.layer_count}")
    d = int(dims.d_model)
    return sum(len(PROJECTIONS) * r * (d + d) for r in plan.per_layer_rank) + int(extras)


def theoretical_rank_bound(d: int, rho: float, kappa_x: float, kappa_y: float,
                           eps: float, constant: float = 1.0) -> int:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if kappa_x < 1.0 or kappa_y < 1.0:
        raise ValueError("condition numbers are >= 1")
    raw = constant * d * (1.0 - rho) * kappa_x * kappa_y / eps
    # Guard against 1 - rho leaving a ~1e-16 residue that ceil would round up.
    r = math.ceil(raw - 1e-9)
    return int(min(max(r, 0), d))


class AlignTarget(str, enum.Enum):
    W_STAR = "w_star"
    W_STAR_MINUS_I = "w_star_minus_i"


@dataclass
class AlignerResult:
    w_star: np.ndarray
    d: int
    kappa_x: float
    kappa_y: float
    residual_at_rank: np.ndarray
    residual_minus_identity: np.ndarray
    singular_values: np.ndarray
    singular_values_minus_identity: np.ndarray
    singular_gram: bool = False


def optimal_aligner(x, y, tol: float = numerics.DEFAULT_PINV_TOL) -> AlignerResult:
    """Least-squares map W with Y ~ W X for feature-by-sample matrices X, Y (d x n)."""
    x = numerics.as_matrix(x)
    y = numerics.as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError("x and y need the same number of samples (columns)")
    gram_x = x @ x.T
    gram_y = y @ y.T
    singular = numerics.numerical_rank(gram_x, tol) < gram_x.shape[0]
    if singular:
        warnings.warn("X X^T is numerically singular; using the pseudo-inverse", RuntimeWarning,
                      stacklevel=2)
    w = y @ x.T @ numerics.pseudo_inverse(gram_x, tol)
    s = numerics.svd(w).singular_values
    d = x.shape[0]
    if w.shape[0] == w.shape[1]:
        s_mi = numerics.svd(w - np.eye(d)).singular_values
    else:
        s_mi = np.full(0, np.nan)
    return AlignerResult(
        w_star=w,
        d=d,
        kappa_x=numerics.condition_number(gram_x, tol),
        kappa_y=numerics.condition_number(gram_y, tol),
        residual_at_rank=numerics.truncation_errors(s),
        residual_minus_identity=numerics.truncation_errors(s_mi),
        singular_values=s,
        singular_values_minus_identity=s_mi,
        singular_gram=singular,
    )


def required_rank_empirical(aligner: AlignerResult, eps: float,
                            mode: AlignTarget = AlignTarget.W_STAR) -> int:
    """Smallest truncation rank whose Frobenius residual is at most ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mode = AlignTarget(mode)
    if mode is AlignTarget.W_STAR_MINUS_I and aligner.w_star.shape[0] != aligner.w_star.shape[1]:
        raise ShapeError("W* - I is only defined for square aligners")
    residuals = (aligner.residual_at_rank if mode is AlignTarget.W_STAR
                 else aligner.residual_minus_identity)
    hits = np.nonzero(residuals <= eps)[0]
    return int(hits[0]) if hits.size else len(residuals) - 1


@dataclass(frozen=True)
class SpectralDecayFit:
    c: float
    alpha: float
    fit_residual: float

    @property
    def mild_decay(self) -> bool:
        return self.alpha > 0.5


def fit_spectral_decay(singular_values) -> SpectralDecayFit:
    """Least-squares power law ``lambda_i ~ C / i**alpha`` over positive values."""
    s = np.asarray(singular_values, dtype=np.float64)
    idx = np.arange(1, s.size + 1, dtype=np.float64)
    pos = s > 0
    if np.count_nonzero(pos) < 3:
        raise ValueError("need at least three strictly positive singular values")
    log_i = np.log(idx[pos])
    log_s = np.log(s[pos])
    design = np.column_stack([np.ones_like(log_i), -log_i])
    coef, *_ = np.linalg.lstsq(design, log_s, rcond=None)
    resid = log_s - design @ coef
    fit = SpectralDecayFit(c=float(np.exp(coef[0])), alpha=float(coef[1]),
                           fit_residual=float(np.sqrt(np.sum(resid * resid))))
    if not fit.mild_decay:
        warnings.warn(f"spectral decay exponent {fit.alpha:.3f} <= 1/2", RuntimeWarning,
                      stacklevel=2)
    return fit
