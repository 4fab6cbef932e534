"""Study configuration: JSON loading, validation and the built-in studies."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .. import plant as pl
from ..errors import ConfigurationError
from ..metatrain import OptimizerConfig
from ..mpc import CostSpec

SCHEMA_VERSION = 1

BASELINE_KINDS = ("Nominal", "GroundTruth", "OffsetCompensation", "SingleTask", "MultiTask",
                  "NeuralNetwork")
ADAPTIVE_KINDS = ("OffsetCompensation", "SingleTask", "MultiTask", "NeuralNetwork")


@dataclass(frozen=True, order=True)
class Baseline:
    kind: str
    task_id: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Baseline":
        kind, _, arg = text.partition(":")
        if kind not in BASELINE_KINDS:
            raise ConfigurationError(f"unknown baseline {text!r}; expected one of {BASELINE_KINDS}")
        if kind == "SingleTask" and not arg:
            raise ConfigurationError("SingleTask baselines need a training task id, e.g. SingleTask:task1")
        return cls(kind, arg or None)

    @property
    def label(self) -> str:
        return f"SingleTask({self.task_id})" if self.kind == "SingleTask" else self.kind

    @property
    def spec(self) -> str:
        return f"{self.kind}:{self.task_id}" if self.task_id else self.kind

    @property
    def adaptive(self) -> bool:
        return self.kind in ADAPTIVE_KINDS

    @property
    def artifact_name(self) -> str | None:
        return {"OffsetCompensation": "offset", "MultiTask": "multitask",
                "NeuralNetwork": "mlp"}.get(self.kind) or (
            f"single_{self.task_id}" if self.kind == "SingleTask" else None)


@dataclass
class AdapterConfig:
    sigma_Q: float = 1e-6
    sigma_R: str | float = "fixed"  # "fixed" -> noise_std**2, "estimate", or a number
    batch_size: int = 100
    offset_prior: float = 10.0
    measurement: str = "finite_difference"  # or "accel_estimator"
    q_jerk: float = 1e4
    meas_noise: tuple[float, float] = (0.0, 0.0)


@dataclass
class StudyConfig:
    name: str
    plant: dict
    tasks: dict
    train_tasks: list[str]
    eval_tasks: list[str]
    baselines: list[Baseline]
    reference: dict = field(default_factory=lambda: {"levels": [0.0, 0.5], "period": 2.0})
    duration: float = 8.0
    dt: float = 0.02
    horizon: float = 1.5
    cost: dict = field(default_factory=lambda: {"Q": [100.0, 1.0], "R": [0.1]})
    E: int = 3
    multitask_tasks: list[str] | None = None
    mlp: dict = field(default_factory=lambda: {"hidden": 20, "L": 9, "tasks": None})
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mlp_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    noise_std: float = 0.05
    n_seeds: int = 20
    seed: int = 0
    collect_seed: int = 1000
    out: str = "out"

    # ------------------------------------------------------------------
    def build_plant(self) -> pl.PlantSpec:
        p = dict(self.plant)
        kind = p.pop("kind")
        if "mass" in p:
            p["mass"] = p.pop("mass")
        return pl.make_plant(kind, **p)

    def task_list(self) -> list[pl.DisturbanceTask]:
        return pl.make_task_family(self.tasks)

    def task(self, task_id: str) -> pl.DisturbanceTask:
        for t in self.task_list():
            if t.task_id == task_id:
                return t
        raise ConfigurationError(f"unknown task {task_id!r}")

    def schedule(self) -> pl.ReferenceSchedule:
        return pl.ReferenceSchedule(tuple(float(v) for v in self.reference["levels"]),
                                    float(self.reference["period"]), float(self.duration),
                                    float(self.dt))

    def cost_spec(self) -> CostSpec:
        c = self.cost
        Q = np.diag(np.asarray(c["Q"], dtype=float))
        R = np.diag(np.asarray(c["R"], dtype=float))
        sched = self.schedule()
        n = Q.shape[0]
        ub = c.get("input_bounds")
        sb = c.get("soft_state_bounds")
        return CostSpec(
            Q=Q, R=R, Qf=float(c.get("terminal_weight", 1.0)) * Q,
            reference=lambda t: sched.desired_state(t, n),
            input_bounds=None if ub is None else (ub[0], ub[1]),
            soft_state_bounds=None if sb is None else (sb[0], sb[1], sb[2]),
        )

    def sigma_R_value(self) -> float | None:
        s = self.adapter.sigma_R
        if s == "fixed":
            return self.noise_std**2
        if s == "estimate":
            return None
        return float(s)

    def mt_tasks(self) -> list[str]:
        return list(self.multitask_tasks or self.train_tasks)

    def mlp_tasks(self) -> list[str]:
        return list(self.mlp.get("tasks") or self.train_tasks)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "plant": self.plant,
            "tasks": self.tasks,
            "train_tasks": self.train_tasks,
            "eval_tasks": self.eval_tasks,
            "baselines": [b.spec for b in self.baselines],
            "reference": self.reference,
            "duration": self.duration,
            "dt": self.dt,
            "horizon": self.horizon,
            "cost": self.cost,
            "E": self.E,
            "multitask_tasks": self.multitask_tasks,
            "mlp": self.mlp,
            "optimizer": vars(self.optimizer),
            "mlp_optimizer": vars(self.mlp_optimizer),
            "adapter": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.adapter).items()},
            "noise_std": self.noise_std,
            "n_seeds": self.n_seeds,
            "seed": self.seed,
            "collect_seed": self.collect_seed,
            "out": self.out,
        }

    def training_digest(self) -> str:
        d = self.to_dict()
        keep = ("plant", "tasks", "train_tasks", "reference", "duration", "dt", "horizon", "cost",
                "E", "multitask_tasks", "mlp", "optimizer", "mlp_optimizer", "adapter",
                "noise_std", "collect_seed")
        blob = json.dumps({k: d[k] for k in keep}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parsing


def _need(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigurationError(f"field '{path}{key}' is required")
    return d[key]


def _num(value, path: str, positive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"field '{path}' must be a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigurationError(f"field '{path}' must be an integer, got {value!r}")
    if not math.isfinite(value) or (positive and value <= 0):
        raise ConfigurationError(f"field '{path}' must be a {'positive ' if positive else ''}finite number")
    return int(value) if integer else float(value)


def _numlist(value, path: str, length=None):
    if not isinstance(value, list) or (length is not None and len(value) != length):
        want = f" of length {length}" if length is not None else ""
        raise ConfigurationError(f"field '{path}' must be a list{want}")
    return [_num(v, f"{path}[{i}]") for i, v in enumerate(value)]


def _optimizer(d, path) -> OptimizerConfig:
    if d is None:
        return OptimizerConfig()
    if not isinstance(d, dict):
        raise ConfigurationError(f"field '{path}' must be an object")
    known = OptimizerConfig.__dataclass_fields__
    for k, v in d.items():
        if k not in known:
            raise ConfigurationError(f"field '{path}.{k}' is not a known optimizer option")
        _num(v, f"{path}.{k}", integer=k in ("iterations", "restarts", "seed"))
    return OptimizerConfig.from_dict(d)


def study_from_dict(d: dict) -> StudyConfig:
    if not isinstance(d, dict):
        raise ConfigurationError("config root must be a JSON object")
    ver = d.get("schema_version", SCHEMA_VERSION)
    if ver != SCHEMA_VERSION:
        raise ConfigurationError(f"field 'schema_version': unsupported version {ver!r}")
    name = str(_need(d, "name", ""))
    plant = _need(d, "plant", "")
    if not isinstance(plant, dict) or "kind" not in plant:
        raise ConfigurationError("field 'plant.kind' is required")
    try:
        pl.PlantKind(plant["kind"])
    except ValueError:
        raise ConfigurationError(f"field 'plant.kind': unknown plant {plant['kind']!r}") from None
    tasks = _need(d, "tasks", "")
    if isinstance(tasks, str):
        tasks = {"name": tasks}
    try:
        task_ids = [t.task_id for t in pl.make_task_family(tasks)]
    except ConfigurationError as exc:
        raise ConfigurationError(f"field 'tasks.name': {exc}") from None
    train = _need(d, "train_tasks", "")
    evals = _need(d, "eval_tasks", "")
    for key, ids in (("train_tasks", train), ("eval_tasks", evals),
                     ("multitask_tasks", d.get("multitask_tasks") or []),
                     ("mlp.tasks", (d.get("mlp") or {}).get("tasks") or [])):
        if not isinstance(ids, list):
            raise ConfigurationError(f"field '{key}' must be a list of task ids")
        for i, t in enumerate(ids):
            if t not in task_ids:
                raise ConfigurationError(f"field '{key}[{i}]': unknown task {t!r}")
    baselines = []
    for i, b in enumerate(_need(d, "baselines", "")):
        try:
            bl = Baseline.parse(b)
        except ConfigurationError as exc:
            raise ConfigurationError(f"field 'baselines[{i}]': {exc}") from None
        if bl.kind == "SingleTask" and bl.task_id not in train:
            raise ConfigurationError(
                f"field 'baselines[{i}]': SingleTask task {bl.task_id!r} is not a training task")
        baselines.append(bl)
    ref = d.get("reference", {"levels": [0.0, 0.5], "period": 2.0})
    if not isinstance(ref, dict):
        raise ConfigurationError("field 'reference' must be an object")
    _numlist(_need(ref, "levels", "reference."), "reference.levels")
    _num(_need(ref, "period", "reference."), "reference.period", positive=True)
    cost = d.get("cost", {"Q": [100.0, 1.0], "R": [0.1]})
    _numlist(_need(cost, "Q", "cost."), "cost.Q", 2)
    _numlist(_need(cost, "R", "cost."), "cost.R", 1)
    for key in ("input_bounds", "soft_state_bounds"):
        if cost.get(key) is not None:
            v = cost[key]
            if not isinstance(v, list) or len(v) != (2 if key == "input_bounds" else 3):
                raise ConfigurationError(f"field 'cost.{key}' has the wrong shape")
    ad = dict(d.get("adapter") or {})
    known = AdapterConfig.__dataclass_fields__
    for k in ad:
        if k not in known:
            raise ConfigurationError(f"field 'adapter.{k}' is not a known adapter option")
    if "meas_noise" in ad:
        ad["meas_noise"] = tuple(_numlist(ad["meas_noise"], "adapter.meas_noise", 2))
    sr = ad.get("sigma_R", "fixed")
    if not (sr in ("fixed", "estimate") or (isinstance(sr, (int, float)) and sr > 0)):
        raise ConfigurationError("field 'adapter.sigma_R' must be 'fixed', 'estimate' or a positive number")
    if ad.get("measurement", "finite_difference") not in ("finite_difference", "accel_estimator"):
        raise ConfigurationError("field 'adapter.measurement' must be finite_difference or accel_estimator")
    mlp = d.get("mlp") or {"hidden": 20, "L": 9, "tasks": None}
    cfg = StudyConfig(
        name=name,
        plant=plant,
        tasks=tasks,
        train_tasks=list(train),
        eval_tasks=list(evals),
        baselines=baselines,
        reference=ref,
        duration=_num(d.get("duration", 8.0), "duration", positive=True),
        dt=_num(d.get("dt", 0.02), "dt", positive=True),
        horizon=_num(d.get("horizon", 1.5), "horizon", positive=True),
        cost=cost,
        E=_num(d.get("E", 3), "E", positive=True, integer=True),
        multitask_tasks=d.get("multitask_tasks"),
        mlp=mlp,
        optimizer=_optimizer(d.get("optimizer"), "optimizer"),
        mlp_optimizer=_optimizer(d.get("mlp_optimizer"), "mlp_optimizer"),
        adapter=AdapterConfig(**ad),
        noise_std=_num(d.get("noise_std", 0.05), "noise_std"),
        n_seeds=_num(d.get("n_seeds", 20), "n_seeds", positive=True, integer=True),
        seed=_num(d.get("seed", 0), "seed", integer=True),
        collect_seed=_num(d.get("collect_seed", 1000), "collect_seed", integer=True),
        out=str(d.get("out", "out")),
    )
    try:
        cfg.build_plant()
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"field 'plant': {exc}") from None
    return cfg


def load_study(path: str | Path) -> StudyConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return study_from_dict(d)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# built-in studies

_BUILTIN: dict[str, dict[str, Any]] = {
    "sinusoid_study": {
        "name": "sinusoid_study",
        "plant": {"kind": "VerticalLoad", "mass": 1.0, "gravity": 9.81, "error_input_indices": [0]},
        "tasks": {"name": "sinusoid_study"},
        "train_tasks": ["task1", "task2", "task3"],
        "eval_tasks": ["task1", "task2", "task3", "task4"],
        "baselines": ["Nominal", "GroundTruth", "OffsetCompensation", "SingleTask:task1",
                      "SingleTask:task2", "SingleTask:task3", "MultiTask"],
        "reference": {"levels": [0.0, 0.5], "period": 2.0},
        "duration": 8.0,
        "dt": 0.02,
        "horizon": 1.5,
        "cost": {"Q": [100.0, 1.0], "R": [0.1], "terminal_weight": 1.0},
        "E": 3,
        "optimizer": {"init_scale": 2.0},
        "adapter": {"sigma_Q": 1e-6, "sigma_R": "fixed", "offset_prior": 10.0,
                    "measurement": "finite_difference"},
        "noise_std": 0.05,
        "n_seeds": 20,
        "out": "out/sinusoid_study",
    },
    "sinexp_study": {
        "name": "sinexp_study",
        "plant": {"kind": "VerticalLoad", "mass": 1.0, "gravity": 9.81, "error_input_indices": [0, 1]},
        "tasks": {"name": "sinexp_study"},
        "train_tasks": [f"train{i:02d}" for i in range(1, 16)],
        "multitask_tasks": [f"train{i:02d}" for i in range(1, 6)],
        "mlp": {"hidden": 100, "L": 9, "tasks": [f"train{i:02d}" for i in range(1, 11)]},
        "eval_tasks": ["test"],
        "baselines": ["Nominal", "GroundTruth", "MultiTask", "NeuralNetwork"],
        "reference": {"levels": [0.0, 0.5], "period": 2.0},
        "duration": 8.0,
        "dt": 0.02,
        "horizon": 1.5,
        "cost": {"Q": [100.0, 1.0], "R": [0.1], "terminal_weight": 1.0},
        "E": 9,
        "adapter": {"sigma_Q": 1e-6, "sigma_R": "fixed", "measurement": "finite_difference"},
        "noise_std": 0.05,
        "n_seeds": 20,
        "out": "out/sinexp_study",
    },
    "door_study": {
        "name": "door_study",
        "plant": {"kind": "HingedDoor", "inertia": 2.0, "error_input_indices": [0, 1]},
        "tasks": {"name": "door_study", "mu_f": [0.0, 0.4, 0.8, 1.2], "c_v": [0.1, 0.3],
                  "inertia": 2.0, "eps": 0.05, "train": [1, 3], "human_stiffness": 2.0,
                  "stiffness_test": 6.0},
        "train_tasks": ["door2", "door4", "door_human"],
        "eval_tasks": ["door_stiff"],
        "baselines": ["Nominal", "GroundTruth", "OffsetCompensation", "MultiTask"],
        "reference": {"levels": [1.2217, 0.35], "period": 3.0},
        "duration": 12.0,
        "dt": 0.02,
        "horizon": 1.0,
        "cost": {"Q": [50.0, 1.0], "R": [0.05], "terminal_weight": 1.0},
        "E": 3,
        "adapter": {"sigma_Q": 1e-6, "sigma_R": "estimate", "batch_size": 100,
                    "offset_prior": 10.0, "measurement": "accel_estimator", "q_jerk": 100.0,
                    "meas_noise": [0.002, 0.01]},
        "noise_std": 0.05,
        "n_seeds": 5,
        "out": "out/door_study",
    },
}


def builtin_study_dict(name: str) -> dict:
    if name not in _BUILTIN:
        raise ConfigurationError(f"unknown built-in study {name!r}; choose from {sorted(_BUILTIN)}")
    return copy.deepcopy(_BUILTIN[name])


def builtin_study(name: str, **overrides) -> StudyConfig:
    d = builtin_study_dict(name)
    d.update(overrides)
    return study_from_dict(d)


def resolve_study(ref: str) -> StudyConfig:
    """A config file path, or the name of a built-in study."""
    if ref in _BUILTIN:
        return builtin_study(ref)
    if ref.endswith(".json") and Path(ref).stem in _BUILTIN and not Path(ref).exists():
        return builtin_study(Path(ref).stem)
    return load_study(ref)
