"""Experiment harness: study configs, baselines, closed-loop rollouts, reports and CLI."""

from .artifacts import ModelArtifact
from .closedloop import RolloutBatch, cost_regret, run_cell, run_closed_loop, simulate
from .config import Baseline, StudyConfig, builtin_study, load_study, study_from_dict
from .report import ExperimentReport, run_benchmark

__all__ = ["Baseline", "ExperimentReport", "ModelArtifact", "RolloutBatch", "StudyConfig",
           "builtin_study", "cost_regret", "load_study", "run_benchmark", "run_cell",
           "run_closed_loop", "simulate", "study_from_dict"]
