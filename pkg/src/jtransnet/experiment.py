"""Experiment plumbing: setting presets, specs, datasets, checkpoints, runs.

File formats
------------
* spec: JSON document validated against :data:`SPEC_SCHEMA`;
* dataset: JSON lines, one profile per line, ``{"brand": [...], "store": [...]}``;
* results: CSV with one row per method;
* checkpoint: ``b"JTNC"``, little-endian u32 version, u64 header length, a
  UTF-8 JSON header (config, architecture, array directory, metadata) and
  then the arrays as little-endian float64 in directory order.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from . import autodiff as ad
from .auction import AuctionConfig
from .baselines import VcgMechanism
from .evaluator import EvalReport, TTestResult, evaluate, paired_t_test
from .model import Architecture, JTransNetMechanism, ModelParams, param_shapes
from .trainer import StepLog, TrainConfig, Trainer, default_grid

log = logging.getLogger(__name__)

SETTINGS: dict[str, dict] = {
    "A": {"num_brands": 4, "num_stores": 2, "ctrs": [0.6]},
    "B": {"num_brands": 3, "num_stores": 3, "ctrs": [0.6, 0.2]},
    "C": {"num_brands": 4, "num_stores": 4, "ctrs": [0.6, 0.2]},
    "D": {"num_brands": 4, "num_stores": 4, "ctrs": [0.6, 0.2, 0.06]},
}

DEFAULT_TEST_SIZE = 9984
DEFAULT_TRAIN_SIZE = 20000


def setting_config(name: str, relation=None) -> AuctionConfig:
    """Preset by letter; the relation defaults to every brand with every store."""
    try:
        p = SETTINGS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown setting {name!r}; choose from {sorted(SETTINGS)}") from None
    if relation is None:
        return AuctionConfig.full(p["num_brands"], p["num_stores"], p["ctrs"])
    return AuctionConfig(p["num_brands"], p["num_stores"], tuple(p["ctrs"]), np.asarray(relation))


# ------------------------------------------------------------------ spec

_INTERVAL = {
    "type": "object",
    "properties": {"low": {"type": "number"}, "high": {"type": "number"}},
    "required": ["low", "high"],
    "additionalProperties": False,
}

SPEC_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentSpec",
    "type": "object",
    "properties": {
        "setting": {"enum": sorted(SETTINGS) + [s.lower() for s in sorted(SETTINGS)]},
        "auction": {
            "type": "object",
            "properties": {
                "num_brands": {"type": "integer", "minimum": 1},
                "num_stores": {"type": "integer", "minimum": 1},
                "ctrs": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "relation": {"type": "array", "items": {"type": "array", "items": {"enum": [0, 1]}}},
            },
            "required": ["num_brands", "num_stores", "ctrs"],
            "additionalProperties": False,
        },
        "relation": {"type": "array", "items": {"type": "array", "items": {"enum": [0, 1]}}},
        "values": {
            "type": "object",
            "properties": {"brand": _INTERVAL, "store": _INTERVAL},
            "additionalProperties": False,
        },
        "train_size": {"type": "integer", "minimum": 1},
        "test_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "train": {"type": "object"},
        "arch": {
            "type": "object",
            "properties": {k: {"type": "integer", "minimum": 1}
                           for k in ("depth", "width", "heads", "ff_width", "pay_width")},
            "additionalProperties": False,
        },
        "test_grid": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    },
    "oneOf": [{"required": ["setting"]}, {"required": ["auction"]}],
    "additionalProperties": False,
}


class SpecError(ValueError):
    """The experiment spec is malformed or inconsistent."""


@dataclass
class ExperimentSpec:
    config: AuctionConfig
    setting: str | None = None
    brand_range: tuple[float, float] = (0.0, 1.0)
    store_range: tuple[float, float] = (0.0, 1.0)
    train_size: int = DEFAULT_TRAIN_SIZE
    test_size: int = DEFAULT_TEST_SIZE
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: Architecture = field(default_factory=Architecture)
    test_grid: tuple[float, ...] = field(default_factory=default_grid)
    seed: int = 0

    def __post_init__(self):
        if self.train_size < 1 or self.test_size < 1:
            raise SpecError("train_size and test_size must be >= 1")
        for name, (lo, hi) in (("brand", self.brand_range), ("store", self.store_range)):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise SpecError(f"{name} value range must be finite with low < high, got ({lo}, {hi})")
            if lo < 0:
                raise SpecError(f"{name} values must be non-negative")

    @property
    def name(self) -> str:
        return self.setting or f"{self.config.num_brands}x{self.config.num_stores}K{self.config.num_slots}"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        try:
            jsonschema.validate(d, SPEC_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SpecError(f"invalid spec: {exc.message}") from None
        try:
            if "setting" in d:
                config = setting_config(d["setting"], d.get("relation"))
                setting = d["setting"].upper()
            else:
                a = d["auction"]
                rel = a.get("relation", np.ones((a["num_brands"], a["num_stores"]), dtype=np.int64))
                config = AuctionConfig(a["num_brands"], a["num_stores"], tuple(a["ctrs"]), np.asarray(rel))
                setting = None
            values = d.get("values", {})
            train = TrainConfig(**{"seed": d.get("seed", 0), **d.get("train", {})})
            return cls(
                config=config,
                setting=setting,
                brand_range=_interval(values.get("brand")),
                store_range=_interval(values.get("store")),
                train_size=d.get("train_size", DEFAULT_TRAIN_SIZE),
                test_size=d.get("test_size", DEFAULT_TEST_SIZE),
                train=train,
                arch=Architecture(**d.get("arch", {})),
                test_grid=tuple(d.get("test_grid", default_grid())),
                seed=d.get("seed", 0),
            )
        except SpecError:
            raise
        except (TypeError, ValueError) as exc:
            raise SpecError(f"invalid spec: {exc}") from None

    def to_dict(self) -> dict:
        d: dict = {}
        if self.setting:
            d["setting"] = self.setting
            d["relation"] = self.config.relation.tolist()
        else:
            d["auction"] = self.config.to_dict()
        d.update({
            "values": {"brand": dict(zip(("low", "high"), self.brand_range)),
                       "store": dict(zip(("low", "high"), self.store_range))},
            "train_size": self.train_size,
            "test_size": self.test_size,
            "seed": self.seed,
            "train": self.train.to_dict(),
            "arch": self.arch.__dict__.copy(),
            "test_grid": list(self.test_grid),
        })
        return d

    def with_seed(self, seed: int) -> "ExperimentSpec":
        d = self.to_dict()
        d["seed"] = seed
        d["train"]["seed"] = seed
        return ExperimentSpec.from_dict(d)


def _interval(d) -> tuple[float, float]:
    return (0.0, 1.0) if d is None else (float(d["low"]), float(d["high"]))


def load_spec(path: str | Path) -> ExperimentSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentSpec.from_dict(d)


# ------------------------------------------------------------------ data

_SPLITS = {"train": 0, "test": 1}


@dataclass
class Dataset:
    brand: np.ndarray
    store: np.ndarray

    def __len__(self) -> int:
        return self.brand.shape[0]


def generate_dataset(spec: ExperimentSpec, split: str = "train", size: int | None = None) -> Dataset:
    """i.i.d. uniform value profiles; train and test use independent streams of the same seed."""
    if split not in _SPLITS:
        raise ValueError(f"split must be one of {sorted(_SPLITS)}")
    size = size if size is not None else (spec.train_size if split == "train" else spec.test_size)
    rng = np.random.default_rng([spec.seed, _SPLITS[split]])
    m, n = spec.config.num_brands, spec.config.num_stores
    brand = rng.uniform(*spec.brand_range, size=(size, m))
    store = rng.uniform(*spec.store_range, size=(size, n))
    return Dataset(brand, store)


def write_jsonl(data: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for b, s in zip(data.brand, data.store):
            fh.write(json.dumps({"brand": b.tolist(), "store": s.tolist()}) + "\n")


def read_jsonl(path: str | Path) -> Dataset:
    brand, store = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                brand.append([float(v) for v in row["brand"]])
                store.append([float(v) for v in row["store"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise OSError(f"{path}:{lineno}: malformed profile ({exc})") from None
    if not brand:
        raise OSError(f"{path}: no profiles")
    try:
        return Dataset(np.asarray(brand), np.asarray(store))
    except ValueError:
        raise OSError(f"{path}: profiles have inconsistent lengths") from None


# ------------------------------------------------------------------ checkpoints

MAGIC = b"JTNC"
CHECKPOINT_VERSION = 1


class CheckpointError(OSError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    config: AuctionConfig
    metadata: dict = field(default_factory=dict)
    lambda_brand: np.ndarray | None = None
    lambda_store: np.ndarray | None = None


def save_checkpoint(params: ModelParams, path: str | Path, config: AuctionConfig, metadata: dict | None = None,
                    lambda_brand=None, lambda_store=None) -> None:
    arrays = {name: t.data for name, t in params.weights.items()}
    arrays["lambda_brand"] = np.zeros(config.num_brands) if lambda_brand is None else np.asarray(lambda_brand, float)
    arrays["lambda_store"] = np.zeros(config.num_stores) if lambda_store is None else np.asarray(lambda_store, float)
    directory = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = json.dumps({
        "config": config.to_dict(),
        "arch": params.arch.__dict__,
        "tau": params.tau,
        "arrays": directory,
        "metadata": metadata or {},
    }, sort_keys=True).encode()
    blob = [MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(header)), header]
    blob += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path: str | Path, config: AuctionConfig | None = None) -> Checkpoint:
    """Read a checkpoint, optionally checking it against the expected auction."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint (bad magic or truncated preamble)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    if 16 + hlen > len(raw):
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
        saved_config = AuctionConfig.from_dict(header["config"])
        arch = Architecture(**header["arch"])
        directory = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from None

    pos = 16 + hlen
    arrays = {}
    for entry in directory:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CorruptCheckpoint(f"{path}: truncated payload in array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise CorruptCheckpoint(f"{path}: {len(raw) - pos} trailing bytes")

    expected = dict(param_shapes(arch))
    target = config if config is not None else saved_config
    expected["lambda_brand"] = (target.num_brands,)
    expected["lambda_store"] = (target.num_stores,)
    for name, shape in expected.items():
        if name not in arrays:
            raise ShapeMismatch(f"{path}: missing array {name!r}")
        if arrays[name].shape != shape:
            raise ShapeMismatch(f"{path}: array {name!r} has shape {arrays[name].shape}, expected {shape}")
    if config is not None and config != saved_config:
        raise ShapeMismatch(
            f"{path}: array 'relation' was saved for {saved_config.relation.shape} with ctrs "
            f"{saved_config.ctrs}, expected {config.relation.shape} with ctrs {config.ctrs}"
        )
    weights = {k: ad.tensor(arrays[k], requires_grad=True) for k in param_shapes(arch)}
    params = ModelParams(arch, weights, float(header.get("tau", 1.0)))
    return Checkpoint(params, saved_config, header.get("metadata", {}),
                      arrays["lambda_brand"], arrays["lambda_store"])


# ------------------------------------------------------------------ runs

RESULT_FIELDS = ["setting", "method", "rev", "rev_se", "sw", "sw_se", "rgt", "p_value", "samples"]


def result_row(setting: str, method: str, report: EvalReport, p_value: float | None = None) -> dict:
    return {
        "setting": setting, "method": method,
        "rev": report.revenue, "rev_se": report.revenue_se,
        "sw": report.welfare, "sw_se": report.welfare_se,
        "rgt": report.regret,
        "p_value": "" if p_value is None else p_value,
        "samples": report.num_samples,
    }


def append_rows(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        if new:
            w.writeheader()
        w.writerows(rows)
        fh.flush()


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    rows: list[dict]
    vcg: EvalReport
    jtransnet: EvalReport | None = None
    ttest: TTestResult | None = None
    params: ModelParams | None = None
    history: list[StepLog] = field(default_factory=list)


def train_model(spec: ExperimentSpec, data: Dataset | None = None,
                callback: Callable[[StepLog], None] | None = None) -> Trainer:
    data = data if data is not None else generate_dataset(spec, "train")
    params = ModelParams.init(spec.arch, seed=spec.train.seed, tau=spec.train.tau)
    trainer = Trainer(spec.config, spec.train, params)
    trainer.run(data.brand, data.store, callback)
    return trainer


def run(spec: ExperimentSpec, out_dir: str | Path | None = None, train: bool = True,
        params: ModelParams | None = None, callback: Callable[[StepLog], None] | None = None) -> RunResult:
    """VCG and (optionally) JTransNet on the same test set, with a paired t-test on revenue.

    With ``out_dir`` the VCG row is written before training starts so that a
    failed or interrupted training still leaves the baseline on disk.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    test = generate_dataset(spec, "test")
    vcg_report = evaluate(VcgMechanism(spec.config), test.brand, test.store, spec.test_grid)
    rows = [result_row(spec.name, "VCG", vcg_report)]
    if out is not None:
        append_rows(out / "results.csv", rows)
    result = RunResult(rows, vcg_report)
    if not train and params is None:
        return result

    if params is None:
        trainer = train_model(spec, callback=callback)
        params = trainer.state.params
        result.history = trainer.history
        if out is not None:
            save_checkpoint(params, out / "model.jtnc", spec.config,
                            {"iteration": trainer.state.t, "seed": spec.train.seed},
                            trainer.state.lambda_brand, trainer.state.lambda_store)
    report = evaluate(JTransNetMechanism(params, spec.config, "hard"), test.brand, test.store, spec.test_grid)
    tt = paired_t_test(report.per_sample_revenue, vcg_report.per_sample_revenue)
    row = result_row(spec.name, "JTransNet", report, tt.p_value)
    rows.append(row)
    if out is not None:
        append_rows(out / "results.csv", [row])
    result.jtransnet, result.ttest, result.params = report, tt, params
    return result
