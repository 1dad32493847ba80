"""``ckarank`` command line: analyze, allocate, train, ablate, report.

Exit codes: 0 success, 1 I/O or unreadable input, 2 usage or invalid
configuration, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import __version__, cka
from ..allocation import EncoderDims, RankPlan, allocate_ranks
from ..cka import CkaProfile
from ..encoder import EncoderConfig
from ..errors import (ConfigurationError, DegenerateInputError, NaNLossError, NumericError, ParseError,
                      PretrainingFailedError, ShapeError)
from . import formats

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "CKARANK_SEED"
RUN_CONFIG_SECTIONS = ("encoder", "train", "task", "loss", "experiment")

log = logging.getLogger("ckarank")


class UsageError(Exception):
    pass


def _floats(text: str, count: int, what: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected {count} comma-separated numbers, got {text!r}") from None
    if len(values) != count:
        raise UsageError(f"{what}: expected {count} values, got {len(values)}")
    return values


def _seed_override() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _emit(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        formats.atomic_write_text(path, text)


# -- run configs ---------------------------------------------------------


def load_run_config(path):
    """Parse a run-config document.

    Every section is optional and a section may give only some keys; the rest
    keep their defaults. Unknown keys are rejected.
    """
    from ..experiments.suites import RunConfig

    doc = {} if path is None else formats.read_json(path)
    if not isinstance(doc, dict):
        raise ConfigurationError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(RUN_CONFIG_SECTIONS))
    if unknown:
        raise ConfigurationError(f"run config: unknown sections {unknown}")
    base = RunConfig()
    sections = {}
    for name in RUN_CONFIG_SECTIONS:
        current = getattr(base, name)
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigurationError(f"{name} must be a JSON object")
        merged = formats.dataclass_to_dict(current)
        if name == "task" and "corruption" in given:
            given = dict(given)
            corruption = given.pop("corruption")
            if not isinstance(corruption, dict):
                raise ConfigurationError("task.corruption must be a JSON object")
            merged["corruption"] = formats.dataclass_from_dict(
                type(current.corruption), {**merged["corruption"], **corruption}, "task.corruption")
        merged.update(given)
        sections[name] = formats.dataclass_from_dict(type(current), merged, name)
    try:
        cfg = RunConfig(**sections)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    seed = _seed_override()
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seeds=(seed,)))
    return cfg


def _workbench(cfg, backbone_path):
    from ..experiments.suites import Workbench, backbone_from_checkpoint
    backbone = None
    if backbone_path is not None:
        backbone = backbone_from_checkpoint(*formats.read_checkpoint(backbone_path))
        if backbone.cfg != cfg.encoder:
            raise ConfigurationError("backbone checkpoint was built for a different encoder config")
    return Workbench(cfg, backbone)


# -- commands -------------------------------------------------------------


def cmd_analyze(args) -> int:
    source = formats.read_activations(args.source)
    target = formats.read_activations(args.target)
    if source.layer_count != target.layer_count:
        raise ShapeError(f"layer counts differ: {source.layer_count} vs {target.layer_count}")
    if source.sample_count != target.sample_count:
        raise ShapeError(f"sample counts differ: {source.sample_count} vs {target.sample_count}")
    if args.seeds < 2:
        raise UsageError("--seeds needs at least 2 bootstrap resamples")
    full = cka.profile(source, target)
    seed = _seed_override()
    rng = np.random.default_rng(args.seed if seed is None else seed)
    n = source.sample_count
    boots = []
    for _ in range(args.seeds):
        rows = rng.integers(0, n, size=n)
        boots.append(cka.profile(source.take_rows(rows), target.take_rows(rows)))
    stats = cka.profile_stats(boots)
    doc = {
        "rho": [float(v) for v in full.rho_per_layer],
        "mean": [float(v) for v in stats.mean_per_layer],
        "std": [float(v) for v in stats.std_per_layer],
        "bootstrap_resamples": args.seeds,
        "sample_count": n,
        "profile_hash": formats.profile_hash(full.rho_per_layer),
        "tool_version": __version__,
    }
    _emit(args.out, formats.dumps_json(doc))
    return EXIT_OK


def _profile_from_doc(doc) -> CkaProfile:
    if isinstance(doc, list):
        rho = doc
    elif isinstance(doc, dict) and "rho" in doc:
        rho = doc["rho"]
    else:
        raise ConfigurationError("profile document needs a 'rho' list")
    try:
        return CkaProfile([float(v) for v in rho])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"profile: {exc}") from exc


def cmd_allocate(args) -> int:
    lower, upper = _floats(args.thresholds, 2, "--thresholds")
    if not lower < upper:
        raise UsageError(f"--thresholds must be increasing, got {lower}, {upper}")
    ranks = _floats(args.ranks, 3, "--ranks")
    if any(r != int(r) or r < 1 for r in ranks):
        raise UsageError("--ranks must be positive integers")
    prof = _profile_from_doc(formats.read_json(args.profile))
    regime_ranks = dict(zip(("shallow", "middle", "deep"), (int(r) for r in ranks)))
    plan = allocate_ranks(prof, (lower, upper), regime_ranks)
    if args.dims < 1:
        raise UsageError("--dims must be positive")
    plan.with_total(EncoderDims(d_model=args.dims, layer_count=len(prof)))
    _emit(args.out, formats.dumps_json(formats.plan_to_doc(plan)))
    return EXIT_OK


def cmd_train(args) -> int:
    from ..experiments.training import build_model, evaluate, train_adapters

    cfg = load_run_config(args.config)
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    wb = _workbench(cfg, args.backbone)
    if args.plan is not None:
        plan = formats.read_plan(args.plan)
        strategy = Path(args.plan).stem
    else:
        plan = wb.cka_plan()
        strategy = "cka-guided"
    if len(plan) != cfg.encoder.layer_count:
        raise ShapeError(f"plan has {len(plan)} layers, encoder has {cfg.encoder.layer_count}")
    out = Path(args.out)
    rows = []
    tensors = {}
    test = wb.dataset("test")
    for seed in cfg.train.seeds:
        run_id = f"{strategy}-s{seed}"
        model = build_model(wb.backbone(), RankPlan(plan.per_layer_rank), seed=seed)
        zero = evaluate(model, test)
        rows.append({"run_id": run_id, "seed": seed, "strategy": strategy, "epoch": 0, "split": "test",
                     "miou": zero.miou, "boundary_f1": zero.boundary_f1})
        if cfg.train.epochs > 0:
            res = train_adapters(model, wb.dataset("train"), replace(cfg.train, seeds=(seed,)), cfg.loss,
                                 seed, test)
            for h in res.history:
                rows.append({"run_id": run_id, "seed": seed, "strategy": strategy, "epoch": h["epoch"],
                             "split": "test", "miou": h["miou"], "boundary_f1": h["boundary_f1"],
                             "loss_dice": h["loss_dice"], "loss_bce": h["loss_bce"],
                             "loss_edge": h["loss_edge"]})
        for name, p in model.trainable():
            tensors[f"s{seed}.{name}"] = p.detach().double().numpy()
    config_doc = cfg.to_dict()
    config_doc["experiment"].pop("cache_dir")
    ckpt_cfg = {"run_config": config_doc, "per_layer_rank": list(plan.per_layer_rank), "strategy": strategy,
                "tool_version": __version__}
    formats.write_checkpoint(out / "adapters.rsam", ckpt_cfg, tensors)
    formats.write_csv(out / "metrics.csv", rows, formats.METRIC_COLUMNS)
    final = [r for r in rows if r["epoch"] == cfg.train.epochs]
    formats.atomic_write_text(out / "run.json", formats.dumps_json({
        "kind": "train", "config": config_doc, "fingerprint": cfg.fingerprint(), "strategy": strategy,
        "final": [{k: r[k] for k in ("run_id", "seed", "miou", "boundary_f1")} for r in final]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from ..experiments.suites import RUN_COLUMNS, run_suite

    cfg = load_run_config(args.config)
    wb = _workbench(cfg, args.backbone)
    report = run_suite(wb, args.suite)
    out = Path(args.out)
    stem = args.suite
    formats.write_csv(out / f"{stem}.csv", report.rows, RUN_COLUMNS)
    config_doc = cfg.to_dict()
    config_doc["experiment"].pop("cache_dir")
    formats.atomic_write_text(out / f"{stem}.json", formats.dumps_json({
        "kind": "ablation", "config": config_doc, "fingerprint": cfg.fingerprint(), **report.to_json()}))
    return EXIT_OK


# -- report -----------------------------------------------------------------


def _fmt(value, digits=4) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.{digits}f}"
    return str(value)


def _tables(doc) -> tuple[list[str], list[dict]]:
    if doc["kind"] == "train":
        cols = ["run_id", "seed", "miou", "boundary_f1"]
        return cols, [dict(r) for r in doc["final"]]
    by_other = {c["other"]: c for c in doc.get("comparisons", [])}
    metric = doc["metric"]
    cols = ["suite", "group", "n", "miou", "boundary_f1", f"delta_{metric}", "p", "p_holm", "reject"]
    rows = []
    for group, s in doc["summary"].items():
        if group.startswith("_"):
            continue
        c = by_other.get(group, {})
        rows.append({
            "suite": doc["suite"], "group": group, "n": s["miou"]["n"],
            "miou": f"{_fmt(s['miou']['mean'])} ± {_fmt(s['miou']['std'])}",
            "boundary_f1": f"{_fmt(s['boundary_f1']['mean'])} ± {_fmt(s['boundary_f1']['std'])}",
            # Deltas read "this group minus the reference".
            f"delta_{metric}": -c["mean"] if c else None,
            "p": c.get("p"), "p_holm": c.get("p_holm"), "reject": c.get("reject"),
        })
    return cols, rows


def _markdown(cols, rows) -> str:
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c)) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    root = Path(args.inp)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    docs = []
    for path in sorted(root.rglob("*.json")):
        doc = formats.read_json(path)
        if isinstance(doc, dict) and doc.get("kind") in ("train", "ablation"):
            docs.append((path, doc))
    if not docs:
        raise UsageError(f"{root} holds no run artifacts")
    prints = {}
    for path, doc in docs:
        prints.setdefault(doc["fingerprint"], []).append(str(path.relative_to(root)))
    if len(prints) > 1:
        listing = "; ".join(f"{fp}: {', '.join(paths)}" for fp, paths in sorted(prints.items()))
        raise UsageError(f"artifacts come from different configs: {listing}")
    parts = []
    for path, doc in docs:
        cols, rows = _tables(doc)
        if args.format == "markdown":
            title = doc.get("suite", "train")
            parts.append(f"### {title} ({path.relative_to(root)})\n\n" + _markdown(cols, rows))
        else:
            parts.append(formats.csv_text([{c: _fmt(r.get(c), 6) for c in cols} for r in rows], cols))
    _emit(args.out, "\n".join(parts))
    return EXIT_OK


# -- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ckarank", description="CKA-guided LoRA rank allocation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="CKA profile between two activation dumps")
    a.add_argument("--source", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--seeds", type=int, default=5, help="bootstrap resamples of the sample rows")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    al = sub.add_parser("allocate", help="rank plan from a CKA profile")
    al.add_argument("--profile", required=True)
    al.add_argument("--thresholds", default="0.5,0.7")
    al.add_argument("--ranks", default="16,8,4")
    al.add_argument("--dims", type=int, default=EncoderConfig().d_model, help="model width d")
    al.add_argument("--out")
    al.set_defaults(func=cmd_allocate)

    t = sub.add_parser("train", help="train adapters for one plan")
    t.add_argument("--config")
    t.add_argument("--plan")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--backbone", help="pretrained backbone checkpoint")
    t.set_defaults(func=cmd_train)

    ab = sub.add_parser("ablate", help="run an ablation suite")
    ab.add_argument("--suite", required=True, choices=("ranks", "lambda", "components", "boundary-shift"))
    ab.add_argument("--config")
    ab.add_argument("--out", required=True)
    ab.add_argument("--backbone")
    ab.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="consolidate run artifacts into tables")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"ckarank: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ShapeError) as exc:
        print(f"ckarank: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, OSError) as exc:
        print(f"ckarank: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NaNLossError, NumericError, DegenerateInputError, PretrainingFailedError) as exc:
        print(f"ckarank: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
