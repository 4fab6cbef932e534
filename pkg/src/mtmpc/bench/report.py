"""Benchmark cross product, regret statistics, ordering verdicts and report files."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from .artifacts import ModelArtifact
from .closedloop import RolloutBatch, run_cell
from .config import Baseline, StudyConfig
from .pipeline import load_artifacts, train_study

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
FINAL_WINDOW = 1.0 / 3.0  # fraction of the run used for the settling checks


@dataclass
class CellSummary:
    baseline: str
    task: str
    n_attempted: int
    n_succeeded: int
    n_failed: int
    median: float
    q25: float
    q75: float
    median_cost: float

    @property
    def band(self) -> float:
        return self.q75 - self.q25

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "task": self.task, "n_attempted": self.n_attempted,
                "n_succeeded": self.n_succeeded, "n_failed": self.n_failed,
                "median_regret": _num(self.median), "q25_regret": _num(self.q25),
                "q75_regret": _num(self.q75), "median_cost": _num(self.median_cost)}


def _num(v):
    return None if v is None or not np.isfinite(v) else float(v)


@dataclass
class ExperimentReport:
    study: str
    rows: list[dict]
    summary: list[CellSummary]
    verdicts: dict = field(default_factory=dict)
    batches: dict = field(default_factory=dict)  # (baseline label, task) -> RolloutBatch

    def cell(self, baseline: str, task: str) -> CellSummary:
        for c in self.summary:
            if c.baseline == baseline and c.task == task:
                return c
        raise KeyError(f"no cell ({baseline}, {task}) in the report")

    def regrets(self, baseline: str, task: str) -> np.ndarray:
        return np.array([r["regret"] for r in self.rows
                         if r["baseline"] == baseline and r["task"] == task and not r["failed"]])

    def summary_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "study": self.study,
                "quantiles": "25% and 75% quantiles of the per-seed regret over succeeded seeds",
                "cells": [c.to_dict() for c in self.summary], "verdicts": self.verdicts}

    def write(self, out_dir: str | Path, trace_seeds: int = 3) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"results": out / "results.csv", "summary": out / "summary.json",
                 "traces": out / "adapter_traces.csv", "diagnostics": out / "diagnostics.csv"}
        with paths["results"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["study", "baseline", "task", "seed", "cost", "regret", "failed"])
            for r in self.rows:
                w.writerow([self.study, r["baseline"], r["task"], r["seed"], repr(r["cost"]),
                            repr(r["regret"]), int(r["failed"])])
        paths["summary"].write_text(json.dumps(self.summary_dict(), sort_keys=True, indent=1) + "\n")
        with paths["traces"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["baseline", "task", "seed", "step", "time", "trace_P", "component", "mean"])
            for (b, t), batch in sorted(self.batches.items()):
                if batch.adapter_mean is None:
                    continue
                for i, seed in enumerate(batch.seeds[:trace_seeds]):
                    M, P = batch.adapter_mean[i], batch.adapter_trace[i]
                    for k in range(M.shape[0]):
                        for c in range(M.shape[1]):
                            w.writerow([b, t, seed, k, repr(float(batch.times[k])), repr(float(P[k])),
                                        c, repr(float(M[k, c]))])
        with paths["diagnostics"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["baseline", "task", "step", "time", "wall_time_s", "kkt_median", "kkt_max",
                        "alpha_min"])
            for (b, t), batch in sorted(self.batches.items()):
                for k in range(batch.kkt.shape[1]):
                    w.writerow([b, t, k, repr(float(batch.times[k])), f"{batch.wall_time[k]:.6f}",
                                repr(float(np.median(batch.kkt[:, k]))), repr(float(batch.kkt[:, k].max())),
                                repr(float(batch.alpha[:, k].min()))])
        return paths


def summarize(rows: list[dict], cells: list[tuple[str, str]]) -> list[CellSummary]:
    out = []
    for b, t in cells:
        sel = [r for r in rows if r["baseline"] == b and r["task"] == t]
        ok = [r for r in sel if not r["failed"]]
        reg = np.array([r["regret"] for r in ok])
        cost = np.array([r["cost"] for r in ok])
        if reg.size:
            q25, med, q75 = np.quantile(reg, [0.25, 0.5, 0.75])
            mc = float(np.median(cost))
        else:
            q25 = med = q75 = mc = float("nan")
        out.append(CellSummary(b, t, len(sel), len(ok), len(sel) - len(ok), float(med), float(q25),
                               float(q75), mc))
    return out


# ---------------------------------------------------------------------------
# verdicts


def final_window_stats(means: np.ndarray, fraction: float = FINAL_WINDOW):
    """Per-seed drift and settling ratio of adapter-mean traces ``(S, K, F)``.

    drift: largest per-component std over the final window.
    settle: largest per-component ratio of that std to the component's range over the run.
    """
    K = means.shape[1]
    tail = means[:, K - max(int(round(fraction * K)), 2):]
    std = tail.std(axis=1)
    rng = np.ptp(means, axis=1)
    drift = std.max(axis=1)
    settle = np.max(std / np.where(rng > 0, rng, np.inf), axis=1)
    return drift, settle


def _median(report, b, t):
    try:
        return report.cell(b, t).median
    except KeyError:
        return float("nan")


def ordering_verdicts(report: ExperimentReport, study: StudyConfig) -> dict:
    family = study.tasks.get("name")
    v: dict = {}
    labels = {b.label for b in study.baselines}
    if family == "sinusoid_study":
        if {"Nominal", "GroundTruth"} <= labels and "task1" in study.eval_tasks:
            nom = _median(report, "Nominal", "task1")
            adaptive = [b.label for b in study.baselines if b.adaptive
                        and (b.kind != "SingleTask" or b.task_id == "task1")]
            v["task1_adaptive_beat_nominal"] = {
                "pass": all(_median(report, b, "task1") < nom for b in adaptive),
                "nominal": nom, "adaptive": {b: _median(report, b, "task1") for b in adaptive}}
        if "task2" in study.eval_tasks:
            mt = _median(report, "MultiTask", "task2")
            others = ["Nominal", "OffsetCompensation", "SingleTask(task1)"]
            v["task2_multitask_beats_nominal_offset_single1"] = {
                "pass": all(mt < _median(report, b, "task2") for b in others),
                "multitask": mt, "others": {b: _median(report, b, "task2") for b in others}}
        if "task4" in study.eval_tasks:
            mt = report.cell("MultiTask", "task4").band
            st = report.cell("SingleTask(task1)", "task4").band
            v["task4_multitask_band_narrower_than_single1"] = {
                "pass": bool(mt < st), "multitask_band": mt, "single1_band": st}
    elif family == "sinexp_study":
        for t in study.eval_tasks:
            nom = _median(report, "Nominal", t)
            for b in ("MultiTask", "NeuralNetwork"):
                if b in labels:
                    m = _median(report, b, t)
                    v[f"{t}_{b}_below_quarter_of_nominal"] = {
                        "pass": bool(m < 0.25 * nom), "median": m, "nominal": nom,
                        "ratio": m / nom if nom else float("nan")}
    elif family == "door_study":
        for t in study.eval_tasks:
            oc = report.batches.get(("OffsetCompensation", t))
            mt = report.batches.get(("MultiTask", t))
            if oc is None or mt is None:
                continue
            ok_oc, ok_mt = ~oc.failed, ~mt.failed
            oc_drift, _ = final_window_stats(oc.adapter_mean[ok_oc])
            mt_drift, mt_settle = final_window_stats(mt.adapter_mean[ok_mt])
            d_oc, d_mt = float(np.median(oc_drift)), float(np.median(mt_drift))
            s_mt = float(np.median(mt_settle))
            v[f"{t}_offset_drifts_multitask_settles"] = {
                "pass": bool(d_oc > 10 * d_mt and s_mt < 0.05),
                "offset_drift": d_oc, "multitask_drift": d_mt, "drift_ratio": d_oc / d_mt,
                "multitask_settle_ratio": s_mt}
    return v


# ---------------------------------------------------------------------------
# runner


def _run_one(args):
    study, baseline, task_id, artifact, seeds = args
    plant = study.build_plant()
    return run_cell(study, plant, study.task(task_id), baseline, artifact, seeds)


def resolve_artifacts(study: StudyConfig, artifacts=None, models_dir=None, train: bool = False
                      ) -> dict[str, ModelArtifact]:
    if artifacts is not None:
        return dict(artifacts)
    if not any(b.adaptive for b in study.baselines):
        return {}
    if models_dir is not None:
        try:
            return load_artifacts(study, models_dir)
        except ConfigurationError:
            if not train:
                raise
    elif not train:
        raise ConfigurationError(
            f"study {study.name} has adaptive baselines but no model artifacts; "
            f"run `mtmpc train --config <config>` or pass --train to train inline")
    arts = train_study(study)
    if models_dir is not None:
        for a in arts.values():
            a.save(models_dir)
    return arts


def run_benchmark(study: StudyConfig, artifacts: dict | None = None, models_dir=None,
                  train: bool = False, out_dir=None, workers: int = 1) -> ExperimentReport:
    """Run every (baseline, task) cell over ``study.n_seeds`` seeds and build the report."""
    arts = resolve_artifacts(study, artifacts, models_dir, train)
    seeds = list(range(study.n_seeds))
    bl = list(study.baselines)
    if not any(b.kind == "GroundTruth" for b in bl):
        bl.append(Baseline("GroundTruth"))
    jobs = [(study, b, t, arts.get(b.artifact_name) if b.adaptive else None, seeds)
            for t in study.eval_tasks for b in bl]
    for _, b, t, a, _ in jobs:
        if b.adaptive and a is None:
            raise ConfigurationError(
                f"missing model artifact for {b.label}; run `mtmpc train --config <config>` first")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    batches: dict[tuple[str, str], RolloutBatch] = {}
    for (_, b, t, _, _), res in zip(jobs, results):
        batches[(b.label, t)] = res
        log.info("%s on %s: %d/%d succeeded", b.label, t, int((~res.failed).sum()), len(seeds))
    rows = []
    for t in study.eval_tasks:
        gt = batches[("GroundTruth", t)]
        for b in study.baselines:
            res = batches[(b.label, t)]
            for i, s in enumerate(seeds):
                failed = bool(res.failed[i] or gt.failed[i])
                cost = float(res.costs[i])
                regret = float("nan") if failed else cost - float(gt.costs[i])
                rows.append({"baseline": b.label, "task": t, "seed": s, "cost": cost,
                             "regret": regret, "failed": failed})
    rows.sort(key=lambda r: (r["task"], r["baseline"], r["seed"]))
    cells = sorted({(r["baseline"], r["task"]) for r in rows}, key=lambda c: (c[1], c[0]))
    report = ExperimentReport(study.name, rows, summarize(rows, cells), batches=batches)
    report.verdicts = ordering_verdicts(report, study)
    if out_dir is not None:
        report.write(out_dir)
    return report


def format_summary(report: ExperimentReport) -> str:
    lines = [f"{'task':<12}{'baseline':<22}{'median':>12}{'q25':>12}{'q75':>12}{'ok/all':>9}"]
    for c in report.summary:
        lines.append(f"{c.task:<12}{c.baseline:<22}{c.median:>12.4f}{c.q25:>12.4f}{c.q75:>12.4f}"
                     f"{c.n_succeeded:>5}/{c.n_attempted}")
    for k, v in report.verdicts.items():
        lines.append(f"verdict {k}: {'PASS' if v['pass'] else 'FAIL'}")
    return "\n".join(lines)
