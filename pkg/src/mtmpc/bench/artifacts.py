"""Model artifacts: the trained error model of one adaptive baseline, as JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from ..features import FeatureModel, PriorSpec

ARTIFACT_SCHEMA_VERSION = 1


@dataclass
class ModelArtifact:
    name: str
    baseline: str
    plant_kind: str
    channels: list[int]
    feature: FeatureModel
    log_lambdas: np.ndarray
    log_sigma_w: np.ndarray
    task_ids: list[str]
    config_digest: str
    objective: float | None = None

    def __post_init__(self):
        self.log_lambdas = np.asarray(self.log_lambdas, dtype=float).reshape(-1)
        self.log_sigma_w = np.asarray(self.log_sigma_w, dtype=float).reshape(-1)
        if self.log_lambdas.shape[0] != self.feature.feature_dim:
            raise ConfigurationError(
                f"artifact {self.name}: {self.log_lambdas.shape[0]} prior variances for "
                f"{self.feature.feature_dim} features")

    def prior(self) -> PriorSpec:
        return PriorSpec(np.exp(self.log_lambdas))

    def to_dict(self) -> dict:
        return {
            "schema_version": ARTIFACT_SCHEMA_VERSION,
            "name": self.name,
            "baseline": self.baseline,
            "plant_kind": self.plant_kind,
            "channels": list(self.channels),
            "feature": self.feature.to_dict(),
            "log_lambdas": self.log_lambdas.tolist(),
            "log_sigma_w": self.log_sigma_w.tolist(),
            "task_ids": list(self.task_ids),
            "config_digest": self.config_digest,
            "objective": self.objective,
        }

    def to_json(self) -> str:
        # repr-based float formatting round-trips every double exactly
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArtifact":
        ver = d.get("schema_version")
        if ver != ARTIFACT_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported model artifact schema_version {ver!r}")
        try:
            return cls(
                name=d["name"], baseline=d["baseline"], plant_kind=d["plant_kind"],
                channels=[int(c) for c in d["channels"]],
                feature=FeatureModel.from_dict(d["feature"]),
                log_lambdas=np.asarray(d["log_lambdas"], dtype=float),
                log_sigma_w=np.asarray(d["log_sigma_w"], dtype=float),
                task_ids=list(d["task_ids"]), config_digest=d["config_digest"],
                objective=d.get("objective"),
            )
        except KeyError as exc:
            raise ConfigurationError(f"model artifact is missing field {exc.args[0]!r}") from None

    @classmethod
    def from_json(cls, text: str) -> "ModelArtifact":
        return cls.from_dict(json.loads(text))

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / f"{self.name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelArtifact":
        return cls.from_json(Path(path).read_text())
