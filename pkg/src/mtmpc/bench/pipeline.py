"""Data collection under the nominal controller and training of the model artifacts."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .. import plant as pl
from ..errors import ConfigurationError
from ..features import FeatureModel
from ..metatrain import TaskDataset, collect_dataset, fit_hyperparams, train_mlp_hyperparams
from ..mpc import OcpSpec, WarmStart, build_ocp, rti_step, sqp_solve
from .artifacts import ModelArtifact
from .closedloop import offset_artifact
from .config import Baseline, StudyConfig

log = logging.getLogger(__name__)


class MpcController:
    """Stateful RTI controller with the ``controller(t, x) -> u`` interface."""

    def __init__(self, ocp: OcpSpec, plant: pl.PlantSpec):
        self.ocp = ocp
        self.plant = plant
        self.warm = None

    def reset(self):
        self.warm = None

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.warm is None:
            N = self.ocp.horizon_steps
            hover = WarmStart(np.tile(x, (N + 1, 1)), np.tile(self.plant.hover_input(), (N, 1)))
            sol = sqp_solve(self.ocp, x, init=hover, t0=t)
            self.warm = WarmStart(sol.states, sol.inputs).shifted()
            return sol.inputs[0].copy()
        u, self.warm, _ = rti_step(self.ocp, x, self.warm, t0=t)
        return u


def nominal_controller(study: StudyConfig, plant: pl.PlantSpec | None = None) -> MpcController:
    plant = plant or study.build_plant()
    return MpcController(build_ocp(plant, None, study.cost_spec(), study.horizon, study.dt), plant)


def collect_study(study: StudyConfig, task_ids=None) -> dict[str, TaskDataset]:
    """One dataset per training task, each from its own seeded noise stream."""
    plant = study.build_plant()
    ids = list(task_ids or study.train_tasks)
    ctrl = nominal_controller(study, plant)
    order = [t.task_id for t in study.task_list()]
    out = {}
    for tid in ids:
        task = study.task(tid)
        seed = study.collect_seed + order.index(tid)
        out[tid] = collect_dataset(plant, task, ctrl, study.schedule(), study.noise_std, seed)
    return out


def save_datasets(datasets: dict[str, TaskDataset], directory: str | Path) -> Path:
    path = Path(directory) / "datasets.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"schema_version": 1, "datasets": [datasets[k].to_dict() for k in sorted(datasets)]}
    path.write_text(json.dumps(blob, sort_keys=True) + "\n")
    return path


def load_datasets(path: str | Path) -> dict[str, TaskDataset]:
    blob = json.loads(Path(path).read_text())
    return {d["task_id"]: TaskDataset.from_dict(d) for d in blob["datasets"]}


def _trig_artifact(study, plant, name, baseline, datasets):
    res = fit_hyperparams(datasets, study.E, study.optimizer)
    hp = res.hyperparams
    return ModelArtifact(name=name, baseline=baseline, plant_kind=plant.kind.value,
                         channels=list(plant.error_indices), feature=hp.feature_model(),
                         log_lambdas=hp.log_lambdas, log_sigma_w=hp.log_sigma_w,
                         task_ids=[D.task_id for D in datasets],
                         config_digest=study.training_digest(), objective=float(res.objective))


def _mlp_artifact(study, plant, datasets):
    res = train_mlp_hyperparams(datasets, (int(study.mlp["hidden"]), int(study.mlp["L"])),
                                study.mlp_optimizer)
    return ModelArtifact(name="mlp", baseline="NeuralNetwork", plant_kind=plant.kind.value,
                         channels=list(plant.error_indices), feature=FeatureModel.from_mlp(res.weights),
                         log_lambdas=np.log(res.prior.lambdas), log_sigma_w=np.log(res.sigma_w),
                         task_ids=[D.task_id for D in datasets],
                         config_digest=study.training_digest(), objective=float(res.objective))


def train_artifact(study: StudyConfig, baseline: Baseline, datasets: dict[str, TaskDataset]
                   ) -> ModelArtifact:
    plant = study.build_plant()
    if baseline.kind == "OffsetCompensation":
        return offset_artifact(study, plant)
    if baseline.kind == "SingleTask":
        return _trig_artifact(study, plant, baseline.artifact_name, baseline.spec,
                              [datasets[baseline.task_id]])
    if baseline.kind == "MultiTask":
        return _trig_artifact(study, plant, "multitask", "MultiTask",
                              [datasets[t] for t in study.mt_tasks()])
    if baseline.kind == "NeuralNetwork":
        return _mlp_artifact(study, plant, [datasets[t] for t in study.mlp_tasks()])
    raise ConfigurationError(f"baseline {baseline.label} has no trained model")


def train_study(study: StudyConfig, datasets: dict[str, TaskDataset] | None = None
                ) -> dict[str, ModelArtifact]:
    """Artifacts for every adaptive baseline of the study, keyed by artifact name."""
    needed = set()
    for b in study.baselines:
        if b.kind == "MultiTask":
            needed |= set(study.mt_tasks())
        elif b.kind == "NeuralNetwork":
            needed |= set(study.mlp_tasks())
        elif b.kind == "SingleTask":
            needed.add(b.task_id)
    if datasets is None:
        datasets = collect_study(study, sorted(needed)) if needed else {}
    missing = needed - set(datasets)
    if missing:
        raise ConfigurationError(f"no dataset for training tasks {sorted(missing)}; run `mtmpc collect`")
    out = {}
    for b in study.baselines:
        if b.adaptive and b.artifact_name not in out:
            log.info("training %s", b.label)
            out[b.artifact_name] = train_artifact(study, b, datasets)
    return out


def load_artifacts(study: StudyConfig, directory: str | Path) -> dict[str, ModelArtifact]:
    """Read the artifacts of every adaptive baseline; fail with the command to run if absent."""
    directory = Path(directory)
    out = {}
    for b in study.baselines:
        if not b.adaptive:
            continue
        path = directory / f"{b.artifact_name}.json"
        if not path.exists():
            raise ConfigurationError(
                f"missing model artifact {path} for baseline {b.label}; "
                f"run `mtmpc train --config <config for {study.name}> --out {directory.parent}` first")
        art = ModelArtifact.load(path)
        if art.config_digest != study.training_digest():
            log.warning("artifact %s was trained with a different configuration", path)
        out[b.artifact_name] = art
    return out
