"""On-disk formats: activation dumps, rank-plan JSON, run configs, checkpoints, CSV.

Binary formats are little-endian regardless of host byte order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import fields, is_dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..allocation import RankPlan, _normalise_ranks
from ..cka import ActivationSet, CkaProfile, Regime, classify_regimes
from ..errors import ConfigurationError, ParseError

ACTV_MAGIC = b"ACTV"
ACTV_VERSION = 1
CKPT_MAGIC = b"RSAM"
CKPT_VERSION = 1
F64 = np.dtype("<f8")


# -- atomic writes ------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


# -- activation dumps ---------------------------------------------------


def encode_activations(acts: ActivationSet) -> bytes:
    out = io.BytesIO()
    out.write(ACTV_MAGIC)
    out.write(struct.pack("<III", ACTV_VERSION, acts.layer_count, acts.sample_count))
    for index, layer in enumerate(acts.per_layer, start=1):
        layer = np.ascontiguousarray(layer, dtype=F64)
        out.write(struct.pack("<II", index, layer.shape[1]))
        out.write(layer.tobytes(order="C"))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise ParseError(f"truncated while reading {what}: need {count} bytes, "
                             f"{len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64_array(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(count * 8, what), dtype=F64).astype(np.float64)

    def expect_end(self):
        if self.pos != len(self.data):
            raise ParseError(f"{len(self.data) - self.pos} trailing bytes after declared content", self.pos)


def decode_activations(data: bytes, source_tag: str = "") -> ActivationSet:
    r = _Reader(data)
    if r.take(4, "magic") != ACTV_MAGIC:
        raise ParseError("not an activation dump (bad magic)", 0)
    at = r.pos
    version = r.u32("version")
    if version != ACTV_VERSION:
        raise ParseError(f"unsupported activation dump version {version}", at)
    layer_count = r.u32("layer count")
    sample_count = r.u32("sample count")
    if layer_count == 0:
        raise ParseError("dump declares zero layers", 8)
    layers = []
    for expected in range(1, layer_count + 1):
        at = r.pos
        index = r.u32("layer index")
        if index != expected:
            raise ParseError(f"layer index {index} where {expected} was expected", at)
        dim = r.u32("feature dim")
        layers.append(r.f64_array(sample_count * dim, f"layer {index} values").reshape(sample_count, dim))
    r.expect_end()
    return ActivationSet(layers, source_tag=source_tag)


def write_activations(path, acts: ActivationSet) -> None:
    atomic_write_bytes(path, encode_activations(acts))


def read_activations(path) -> ActivationSet:
    return decode_activations(Path(path).read_bytes(), source_tag=str(path))


# -- profiles and rank plans -----------------------------------------------


def profile_hash(rho) -> str:
    """SHA-256 of the profile values as little-endian float64."""
    return hashlib.sha256(np.asarray(rho, dtype=F64).tobytes()).hexdigest()


def plan_to_doc(plan: RankPlan) -> dict:
    if plan.rho is None:
        raise ConfigurationError("a rank-plan document needs the profile the plan came from")
    ranks = plan.regime_ranks
    return {
        "thresholds": [float(plan.thresholds[0]), float(plan.thresholds[1])],
        "regime_ranks": {r.value: int(ranks[r]) for r in Regime},
        "per_layer": [
            {"layer": i, "rho": float(rho), "regime": regime.value, "rank": int(rank)}
            for i, (rho, regime, rank) in enumerate(zip(plan.rho, plan.regimes, plan.per_layer_rank), start=1)
        ],
        "total_trainable": None if plan.total_trainable is None else int(plan.total_trainable),
        "provenance": {"profile_hash": profile_hash(plan.rho), "tool_version": __version__},
    }


_PLAN_KEYS = {"thresholds", "regime_ranks", "per_layer", "total_trainable", "provenance"}


def plan_from_doc(doc: dict) -> RankPlan:
    if not isinstance(doc, dict):
        raise ConfigurationError("rank plan must be a JSON object")
    unknown = set(doc) - _PLAN_KEYS
    missing = _PLAN_KEYS - set(doc) - {"total_trainable", "provenance"}
    if unknown or missing:
        raise ConfigurationError(f"rank plan keys: unknown {sorted(unknown)}, missing {sorted(missing)}")
    try:
        ranks = _normalise_ranks(doc["regime_ranks"])
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    rows = doc["per_layer"]
    if [row["layer"] for row in rows] != list(range(1, len(rows) + 1)):
        raise ConfigurationError("per_layer entries must be sorted by layer, starting at 1")
    regimes = [Regime(row["regime"]) for row in rows]
    per_layer_rank = [int(row["rank"]) for row in rows]
    if any(ranks[g] != r for g, r in zip(regimes, per_layer_rank)):
        raise ConfigurationError("per-layer ranks disagree with regime_ranks")
    lower, upper = (float(v) for v in doc["thresholds"])
    rho = [float(row["rho"]) for row in rows]
    expected = [lab.label for lab in classify_regimes(CkaProfile(rho), lower, upper)]
    if expected != regimes:
        raise ConfigurationError("per-layer regimes disagree with thresholds and rho")
    prov = doc.get("provenance") or {}
    if "profile_hash" in prov and prov["profile_hash"] != profile_hash(rho):
        raise ConfigurationError("profile_hash does not match the stored rho values")
    return RankPlan(per_layer_rank, thresholds=(lower, upper), regime_ranks=ranks, regimes=regimes,
                    rho=rho, total_trainable=doc.get("total_trainable"))


def write_plan(path, plan: RankPlan) -> None:
    atomic_write_text(path, dumps_json(plan_to_doc(plan)))


def read_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", len(text[:exc.pos].encode("utf-8"))) from exc


def read_plan(path) -> RankPlan:
    return plan_from_doc(read_json(path))


# -- dataclass <-> dict with strict keys ----------------------------------


def dataclass_from_dict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def dataclass_to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            value = dataclass_to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        elif hasattr(value, "value") and isinstance(getattr(value, "value"), str):
            value = value.value
        out[f.name] = value
    return out


# -- checkpoints ---------------------------------------------------------


def encode_checkpoint(config: dict, tensors: dict) -> bytes:
    """"RSAM", version, JSON config block, then named float64 tensors in name order."""
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=F64, order="C")
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes(order="C"))
    return out.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict, dict]:
    r = _Reader(data)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise ParseError("not a checkpoint (bad magic)", 0)
    at = r.pos
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", at)
    cfg_len = r.u32("config length")
    at = r.pos
    try:
        config = json.loads(r.take(cfg_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"config block is not valid JSON: {exc}", at) from exc
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        ndim = r.u32("ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        tensors[name] = r.f64_array(int(np.prod(shape, dtype=np.int64)), f"tensor {name}").reshape(shape)
    r.expect_end()
    return config, tensors


def write_checkpoint(path, config: dict, tensors: dict) -> None:
    atomic_write_bytes(path, encode_checkpoint(config, tensors))


def read_checkpoint(path) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())


# -- CSV ------------------------------------------------------------------

METRIC_COLUMNS = ("run_id", "seed", "strategy", "epoch", "split", "miou", "boundary_f1",
                  "loss_dice", "loss_bce", "loss_edge")


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns) -> None:
    atomic_write_text(path, csv_text(rows, columns))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
