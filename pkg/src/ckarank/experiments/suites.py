"""Ablation suites over a shared, cached set of adapter-training runs.

A ``Workbench`` owns one run configuration: it pretrains (or loads) the frozen
backbone, renders the Target splits, measures the CKA profile and trains each
distinct (plan, variant, seed) run at most once. Suites assemble
``ExperimentReport`` objects from those runs.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .. import allocation, cka
from ..allocation import RankPlan, TOY_REGIME_RANKS
from ..cka import CkaProfile, Regime
from ..encoder import EncoderConfig, encoder_forward
from ..errors import ConfigurationError
from ..fusion_loss import LossWeights
from .data import DEFAULT_TARGET_CORRUPTION, Dataset, SyntheticTaskConfig, generate_dataset
from .optim import TrainConfig
from .stats import holm_bonferroni, paired_t_test
from .training import (Backbone, SegMetrics, build_model, evaluate, pretrain_frozen_backbone,
                       train_adapters)

log = logging.getLogger(__name__)

STRATEGIES = ("uniform-low", "uniform-mid", "uniform-high", "inverted", "random", "cka-guided")
VARIANTS = ("full", "w/o CKA", "w/o depth", "w/o edge", "RGB-only CKA-guided")
SUITES = ("ranks", "lambda", "components", "boundary-shift")

# Scene index ranges per split, so no two splits ever share a scene.
TARGET_TRAIN_OFFSET = 1_000_000
TARGET_TEST_OFFSET = 2_000_000
PROFILE_OFFSET = 3_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 512
    n_test: int = 512
    n_pretrain: int = 4096
    n_heldout: int = 256
    pretrain_epochs: int = 30
    pretrain_lr: float = 2e-3
    profile_samples: int = 256
    regime_sizes: tuple = (3, 3, 2)
    thresholds: tuple | None = None
    regime_ranks: dict = field(default_factory=lambda: {r.value: v for r, v in TOY_REGIME_RANKS.items()})
    uniform_low: int = 2
    uniform_high: int = 8
    lambdas: tuple = (0.0, 0.5, 2.0)
    shifts: tuple = (-1, 0, 1)
    budget_tolerance: float = 0.05
    alpha: float = 0.05
    cache_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "regime_sizes", tuple(int(v) for v in self.regime_sizes))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "shifts", tuple(int(v) for v in self.shifts))
        if self.thresholds is not None:
            object.__setattr__(self, "thresholds", tuple(float(v) for v in self.thresholds))
        if min(self.n_train, self.n_test, self.n_heldout, self.profile_samples) < 2:
            raise ConfigurationError("dataset sizes must be >= 2")
        if len(self.regime_sizes) != 3 or min(self.regime_sizes) < 1:
            raise ConfigurationError("regime_sizes needs three positive layer counts")


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, learning_rate=2e-3))
    task: SyntheticTaskConfig = field(
        default_factory=lambda: SyntheticTaskConfig(seed=7).as_target(DEFAULT_TARGET_CORRUPTION))
    loss: LossWeights = field(default_factory=LossWeights)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if sum(self.experiment.regime_sizes) != self.encoder.layer_count:
            raise ConfigurationError("regime_sizes must add up to the encoder's layer_count")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "train": {**asdict(self.train), "seeds": list(self.train.seeds)},
            "task": self.task.to_dict(),
            "loss": asdict(self.loss),
            "experiment": {**asdict(self.experiment),
                           "regime_sizes": list(self.experiment.regime_sizes),
                           "lambdas": list(self.experiment.lambdas),
                           "shifts": list(self.experiment.shifts),
                           "thresholds": None if self.experiment.thresholds is None
                           else list(self.experiment.thresholds)},
        }

    def fingerprint(self, *sections) -> str:
        d = self.to_dict()
        d["experiment"].pop("cache_dir")
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunSpec:
    """Everything that distinguishes one adapter-training run from another."""

    label: str
    ranks: tuple | None
    seed: int
    use_depth: bool = True
    zero_depth: bool = False
    lambda_edge: float = 0.5

    def key(self) -> str:
        ranks = "none" if self.ranks is None else "-".join(map(str, self.ranks))
        return (f"r{ranks}_s{self.seed}_d{int(self.use_depth)}{int(self.zero_depth)}"
                f"_l{self.lambda_edge!r}")


@dataclass
class RunRecord:
    spec: RunSpec
    metrics: SegMetrics
    trainable: int
    adapter_params: int
    history: list
    wall_clock: float = 0.0

    def row(self, group: str) -> dict:
        return {"run_id": self.spec.key(), "group": group, "seed": self.spec.seed,
                "ranks": " ".join(map(str, self.spec.ranks or ())), "use_depth": int(self.spec.use_depth),
                "zero_depth": int(self.spec.zero_depth), "lambda_edge": self.spec.lambda_edge,
                "trainable": self.trainable, "adapter_params": self.adapter_params,
                "miou": self.metrics.miou, "boundary_f1": self.metrics.boundary_f1,
                "miou_transparent": self.metrics.miou_transparent}

    def to_json(self) -> dict:
        return {"spec": {**asdict(self.spec), "ranks": None if self.spec.ranks is None else list(self.spec.ranks)},
                "metrics": asdict(self.metrics), "trainable": self.trainable,
                "adapter_params": self.adapter_params, "history": self.history,
                "wall_clock": self.wall_clock}

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        spec = dict(d["spec"])
        spec["ranks"] = None if spec["ranks"] is None else tuple(spec["ranks"])
        return cls(RunSpec(**spec), SegMetrics(**d["metrics"]), d["trainable"], d["adapter_params"],
                   d["history"], d.get("wall_clock", 0.0))


RUN_COLUMNS = ("run_id", "group", "seed", "ranks", "use_depth", "zero_depth", "lambda_edge",
               "trainable", "adapter_params", "miou", "boundary_f1", "miou_transparent")


@dataclass
class ExperimentReport:
    suite: str
    metric: str
    rows: list
    summary: dict
    comparisons: list
    wall_clock: dict = field(default_factory=dict)

    def means(self, column: str | None = None) -> dict:
        column = column or self.metric
        # Keys starting with "_" carry plans and derived numbers, not groups.
        return {k: v[column]["mean"] for k, v in self.summary.items() if not k.startswith("_")}

    def to_json(self) -> dict:
        return {"suite": self.suite, "metric": self.metric, "summary": self.summary,
                "comparisons": self.comparisons}


def calibrate_thresholds(prof: CkaProfile, regime_sizes) -> tuple[float, float]:
    """Cut points that put the ``regime_sizes`` lowest/middle/highest-rho layers into
    the shallow/middle/deep regimes (midpoints between neighbouring sorted values)."""
    rho = np.sort(np.asarray(prof.rho_per_layer))
    n_s, n_m, _ = regime_sizes
    if sum(regime_sizes) != rho.size:
        raise ConfigurationError("regime sizes do not cover the profile")
    lower = 0.5 * (rho[n_s - 1] + rho[n_s])
    upper = 0.5 * (rho[n_s + n_m - 1] + rho[n_s + n_m])
    if not lower < upper:
        raise ConfigurationError("profile has ties that prevent a three-way split")
    return float(lower), float(upper)


def _summarise(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0, "n": int(v.size),
            "values": [float(x) for x in v]}


class Workbench:
    def __init__(self, config: RunConfig, backbone: Backbone | None = None):
        self.config = config
        self._backbone = backbone
        self._runs: dict[str, RunRecord] = {}
        self._data: dict[str, Dataset] = {}
        self._profile = None
        cache = config.experiment.cache_dir
        self.cache_dir = Path(cache) if cache else None

    # -- shared artifacts ---------------------------------------------

    @property
    def target_task(self) -> SyntheticTaskConfig:
        return self.config.task

    def backbone(self) -> Backbone:
        if self._backbone is None:
            from ..cli_io.formats import read_checkpoint, write_checkpoint
            exp = self.config.experiment
            path = None
            if self.cache_dir is not None:
                key = self.config.fingerprint("encoder", "task")
                path = self.cache_dir / f"backbone_{key}_{exp.n_pretrain}_{exp.pretrain_epochs}_{exp.pretrain_lr!r}.rsam"
            if path is not None and path.exists():
                self._backbone = backbone_from_checkpoint(*read_checkpoint(path))
            else:
                cfg = TrainConfig(epochs=exp.pretrain_epochs, learning_rate=exp.pretrain_lr,
                                  weight_decay=self.config.train.weight_decay, seeds=(0,))
                self._backbone = pretrain_frozen_backbone(self.config.encoder, self.config.task, cfg,
                                                          n_train=exp.n_pretrain, n_heldout=exp.n_heldout)
                if path is not None:
                    write_checkpoint(path, *backbone_to_checkpoint(self._backbone))
        return self._backbone

    def dataset(self, split: str) -> Dataset:
        if split not in self._data:
            exp = self.config.experiment
            task = self.target_task
            if split == "train":
                ds = generate_dataset(task, exp.n_train, offset=TARGET_TRAIN_OFFSET)
            elif split == "test":
                ds = generate_dataset(task, exp.n_test, offset=TARGET_TEST_OFFSET)
            elif split == "source-test":
                ds = generate_dataset(task.as_source(), exp.n_test, offset=TARGET_TEST_OFFSET)
            else:
                raise ConfigurationError(f"unknown split {split!r}")
            self._data[split] = ds
        return self._data[split]

    def zero_shot(self, split: str = "test") -> SegMetrics:
        return evaluate(build_model(self.backbone(), None, seed=0, use_depth=False), self.dataset(split))

    def profile_for_seed(self, seed: int) -> CkaProfile:
        """Source-vs-Target CKA of the frozen encoder on one seed's paired scenes."""
        n = self.config.experiment.profile_samples
        task = replace(self.target_task, seed=int(seed))
        enc = self.backbone().encoder()
        src, _ = encoder_forward(enc, generate_dataset(task.as_source(), n, offset=PROFILE_OFFSET).images,
                                 source_tag="source")
        tgt, _ = encoder_forward(enc, generate_dataset(task, n, offset=PROFILE_OFFSET).images,
                                 source_tag="target")
        return cka.profile(src, tgt)

    def profile_stats(self) -> cka.ProfileStats:
        if self._profile is None:
            profiles = [self.profile_for_seed(s) for s in self.config.train.seeds]
            if len(profiles) == 1:
                rho = np.asarray(profiles[0].rho_per_layer)
                self._profile = cka.ProfileStats(rho, np.zeros_like(rho), 1, profiles)
            else:
                self._profile = cka.profile_stats(profiles)
        return self._profile

    # -- plans ----------------------------------------------------------

    def thresholds(self) -> tuple[float, float]:
        exp = self.config.experiment
        if exp.thresholds is not None:
            return exp.thresholds
        return calibrate_thresholds(CkaProfile(self.profile_stats().mean_per_layer), exp.regime_sizes)

    def cka_plan(self) -> RankPlan:
        prof = CkaProfile(self.profile_stats().mean_per_layer)
        plan = allocation.allocate_ranks(prof, self.thresholds(), self.config.experiment.regime_ranks)
        return plan.with_total(self.config.encoder.dims)

    def strategy_plan(self, strategy: str, seed: int) -> RankPlan:
        exp = self.config.experiment
        base = self.cka_plan()
        layers = len(base)
        if strategy == "cka-guided":
            return base
        if strategy == "uniform-low":
            return RankPlan.uniform(exp.uniform_low, layers)
        if strategy == "uniform-high":
            return RankPlan.uniform(exp.uniform_high, layers)
        if strategy == "uniform-mid":
            return RankPlan.uniform(max(1, round(sum(base.per_layer_rank) / layers)), layers)
        if strategy == "inverted":
            # Same rank multiset, handed out in the opposite order of rho.
            order = np.argsort(np.asarray(base.rho), kind="stable")
            ranks = sorted(base.per_layer_rank)
            out = [0] * layers
            for layer, rank in zip(order, ranks):
                out[layer] = rank
            return RankPlan(out)
        if strategy == "random":
            regimes = list(Regime)
            values = [base.regime_ranks[r] for r in regimes]
            perms = [p for p in itertools.permutations(values) if list(p) != values]
            pick = perms[np.random.default_rng(seed).integers(len(perms))]
            mapping = dict(zip(regimes, pick))
            return RankPlan([mapping[r] for r in base.regimes], regime_ranks=mapping, regimes=list(base.regimes))
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")

    def check_budget(self, a: RankPlan, b: RankPlan, what: str) -> None:
        dims = self.config.encoder.dims
        ca, cb = allocation.count_trainable_params(a, dims), allocation.count_trainable_params(b, dims)
        if abs(ca - cb) > self.config.experiment.budget_tolerance * max(ca, cb):
            raise ConfigurationError(f"{what}: adapter budgets {ca} vs {cb} differ by more than "
                                     f"{self.config.experiment.budget_tolerance:.0%}")

    # -- runs -------------------------------------------------------------

    def _cache_path(self, spec: RunSpec) -> Path | None:
        if self.cache_dir is None:
            return None
        key = self.config.fingerprint("encoder", "task", "train", "experiment")
        return self.cache_dir / "runs" / key / f"{spec.key().replace('/', '_')}.json"

    def run(self, spec: RunSpec) -> RunRecord:
        key = spec.key()
        if key in self._runs:
            rec = self._runs[key]
            return replace(rec, spec=replace(rec.spec, label=spec.label))
        path = self._cache_path(spec)
        if path is not None and path.exists():
            rec = RunRecord.from_json(json.loads(path.read_text()))
        else:
            rec = self._train(spec)
            if path is not None:
                from ..cli_io.formats import atomic_write_text, dumps_json
                atomic_write_text(path, dumps_json(rec.to_json()))
        self._runs[key] = rec
        return replace(rec, spec=replace(rec.spec, label=spec.label))

    def build(self, spec: RunSpec):
        plan = None if spec.ranks is None else RankPlan(list(spec.ranks))
        model = build_model(self.backbone(), plan, seed=spec.seed, use_depth=spec.use_depth)
        if spec.zero_depth:
            model.zero_depth = True
        return model

    def _train(self, spec: RunSpec) -> RunRecord:
        torch.manual_seed(spec.seed)
        start = time.perf_counter()
        model = self.build(spec)
        weights = replace(self.config.loss, lambda_edge=spec.lambda_edge)
        cfg = replace(self.config.train, seeds=(spec.seed,))
        res = train_adapters(model, self.dataset("train"), cfg, weights, spec.seed)
        res.final = evaluate(model, self.dataset("test"))
        adapter_params = sum(p.numel() for _, p in model.encoder.adapter_parameters())
        trainable = sum(p.numel() for _, p in model.trainable())
        log.info("run %s: mIoU %.4f BF1 %.4f", spec.key(), res.final.miou, res.final.boundary_f1)
        return RunRecord(spec, res.final, trainable, adapter_params, res.history,
                         wall_clock=time.perf_counter() - start)

    def spec(self, label: str, plan: RankPlan | None, seed: int, **kw) -> RunSpec:
        ranks = None if plan is None else tuple(plan.per_layer_rank)
        kw.setdefault("lambda_edge", self.config.loss.lambda_edge)
        return RunSpec(label, ranks, int(seed), **kw)


def backbone_to_checkpoint(bb: Backbone) -> tuple[dict, dict]:
    tensors = {f"encoder.{k}": v.numpy() for k, v in bb.encoder_state.items()}
    tensors.update({f"head.{k}": v.numpy() for k, v in bb.head_state.items()})
    return {"encoder": bb.cfg.to_dict(), "source_miou": bb.source_miou}, tensors


def backbone_from_checkpoint(config: dict, tensors: dict) -> Backbone:
    cfg = EncoderConfig(**config["encoder"])
    enc = {k[len("encoder."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("encoder.")}
    head = {k[len("head."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("head.")}
    return Backbone(cfg, enc, head, source_miou=config.get("source_miou", float("nan")))


# -- report assembly -------------------------------------------------------


def _report(suite: str, metric: str, records: dict, reference: str | None, alpha: float,
            columns=("miou", "boundary_f1")) -> ExperimentReport:
    """``records`` maps group label -> list of RunRecords ordered by seed."""
    rows = [rec.row(label) for label, recs in records.items() for rec in recs]
    summary = {}
    for label, recs in records.items():
        summary[label] = {c: _summarise([getattr(r.metrics, c) for r in recs]) for c in columns}
        summary[label]["trainable"] = sorted({r.trainable for r in recs})
    comparisons = []
    if reference is not None and len(records) > 1:
        ref = {r.spec.seed: r for r in records[reference]}
        for label, recs in records.items():
            if label == reference:
                continue
            paired = [(ref[r.spec.seed], r) for r in recs if r.spec.seed in ref]
            deltas = [getattr(a.metrics, metric) - getattr(b.metrics, metric) for a, b in paired]
            test = paired_t_test(deltas)
            comparisons.append({"reference": reference, "other": label, "metric": metric,
                                "deltas": deltas, **test.to_dict()})
        if comparisons:
            reject, adjusted = holm_bonferroni([c["p"] for c in comparisons], alpha)
            for c, rej, adj in zip(comparisons, reject, adjusted):
                c["p_holm"] = adj
                c["reject"] = rej
    wall = {label: float(sum(r.wall_clock for r in recs)) for label, recs in records.items()}
    return ExperimentReport(suite, metric, rows, summary, comparisons, wall)


def rank_strategy_ablation(wb: Workbench, strategies=("cka-guided", "uniform-mid", "inverted")) -> ExperimentReport:
    strategies = list(strategies)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
    base = wb.cka_plan()
    for s in ("uniform-mid", "inverted"):
        if s in strategies:
            wb.check_budget(base, wb.strategy_plan(s, 0), f"cka-guided vs {s}")
    records = {}
    for s in strategies:
        records[s] = [wb.run(wb.spec(s, wb.strategy_plan(s, seed), seed)) for seed in wb.config.train.seeds]
    reference = "cka-guided" if "cka-guided" in strategies else None
    report = _report("ranks", "miou", records, reference, wb.config.experiment.alpha)
    report.summary["_plans"] = {s: [list(wb.strategy_plan(s, seed).per_layer_rank) for seed in wb.config.train.seeds]
                                for s in strategies}
    return report


def lambda_sweep(wb: Workbench, values=None) -> ExperimentReport:
    values = [float(v) for v in (values if values is not None else wb.config.experiment.lambdas)]
    if 0.0 not in values:
        raise ConfigurationError("lambda sweep must include 0")
    plan = wb.cka_plan()
    records = {f"lambda={v!r}": [wb.run(wb.spec(f"lambda={v!r}", plan, seed, lambda_edge=v))
                                 for seed in wb.config.train.seeds] for v in values}
    return _report("lambda", "boundary_f1", records, "lambda=0.0", wb.config.experiment.alpha)


def component_ablation(wb: Workbench, variants=VARIANTS) -> ExperimentReport:
    plan = wb.cka_plan()
    make = {
        "full": lambda s: wb.spec("full", plan, s),
        "w/o CKA": lambda s: wb.spec("w/o CKA", wb.strategy_plan("uniform-mid", s), s),
        "w/o depth": lambda s: wb.spec("w/o depth", plan, s, zero_depth=True),
        "w/o edge": lambda s: wb.spec("w/o edge", plan, s, lambda_edge=0.0),
        "RGB-only CKA-guided": lambda s: wb.spec("RGB-only CKA-guided", plan, s, use_depth=False),
    }
    unknown = [v for v in variants if v not in make]
    if unknown:
        raise ConfigurationError(f"unknown variants {unknown}")
    records = {v: [wb.run(make[v](seed)) for seed in wb.config.train.seeds] for v in variants}
    return _report("components", "miou", records, "full" if "full" in variants else None,
                   wb.config.experiment.alpha, columns=("miou", "boundary_f1", "miou_transparent"))


def boundary_shift_study(wb: Workbench, shifts=None) -> ExperimentReport:
    shifts = [int(s) for s in (shifts if shifts is not None else wb.config.experiment.shifts)]
    base = wb.cka_plan()
    plans = {s: allocation.shift_boundaries(base, s) for s in shifts}
    records = {f"shift={s:+d}": [wb.run(wb.spec(f"shift={s:+d}", plans[s], seed))
                                 for seed in wb.config.train.seeds] for s in shifts}
    reference = "shift=+0" if 0 in shifts else None
    report = _report("boundary-shift", "miou", records, reference, wb.config.experiment.alpha)
    if reference is not None:
        ref = report.summary[reference]["miou"]["mean"]
        report.summary["_max_abs_delta"] = max(
            (abs(v["miou"]["mean"] - ref) for k, v in report.summary.items() if not k.startswith("_")),
            default=0.0)
    report.summary["_plans"] = {f"shift={s:+d}": list(p.per_layer_rank) for s, p in plans.items()}
    return report


def regime_attribution(wb: Workbench) -> dict:
    """Zero one regime's adapters at a time in the trained CKA-guided model.

    A regime's contribution is the mIoU lost when its adapters are removed;
    the total is the gap between the trained model and the same model with
    every adapter removed.
    """
    plan = wb.cka_plan()
    test = wb.dataset("test")
    out = {r.value: [] for r in Regime}
    totals = []
    for seed in wb.config.train.seeds:
        spec = wb.spec("full", plan, seed)
        model = wb.build(spec)
        weights = replace(wb.config.loss, lambda_edge=spec.lambda_edge)
        train_adapters(model, wb.dataset("train"), replace(wb.config.train, seeds=(seed,)), weights, seed)
        full = evaluate(model, test).miou
        saved = {n: p.detach().clone() for n, p in model.encoder.adapter_parameters()}

        def zero(layers):
            with torch.no_grad():
                for i in layers:
                    for ad in model.encoder.blocks[i].adapters.values():
                        ad.b.zero_()

        def restore():
            with torch.no_grad():
                for n, p in model.encoder.adapter_parameters():
                    p.copy_(saved[n])

        zero(range(len(plan)))
        none = evaluate(model, test).miou
        restore()
        totals.append(full - none)
        for regime in Regime:
            layers = [i for i, g in enumerate(plan.regimes) if g is regime]
            zero(layers)
            out[regime.value].append(full - evaluate(model, test).miou)
            restore()
    return {"per_regime": {k: _summarise(v) if v else None for k, v in out.items()},
            "total": _summarise(totals), "regimes": [g.value for g in plan.regimes]}


def run_suite(wb: Workbench, name: str) -> ExperimentReport:
    if name == "ranks":
        return rank_strategy_ablation(wb, STRATEGIES)
    if name == "lambda":
        return lambda_sweep(wb)
    if name == "components":
        return component_ablation(wb)
    if name == "boundary-shift":
        return boundary_shift_study(wb)
    raise ConfigurationError(f"unknown suite {name!r}; expected one of {SUITES}")
