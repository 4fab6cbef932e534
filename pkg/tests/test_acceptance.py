"""Acceptance suite: one recorded PASS/FAIL line per criterion."""

import time

import numpy as np
import pytest

from mtmpc import plant as pl
from mtmpc.adapt import init_adapter, kalman_step
from mtmpc.bench import cli
from mtmpc.bench.artifacts import ModelArtifact
from mtmpc.bench.audit import run_gradcheck
from mtmpc.bench.closedloop import Controller, simulate
from mtmpc.bench.config import Baseline, builtin_study, builtin_study_dict, study_from_dict
from mtmpc.bench.pipeline import collect_study, train_study
from mtmpc.bench.report import run_benchmark
from mtmpc.features import FeatureModel, PriorSpec, eval_features, posterior_update
from mtmpc.metatrain import Hyperparams, OptimizerConfig, TaskDataset, fit_hyperparams, nll_objective, split_dataset
from mtmpc.mpc import CostSpec, WarmStart, build_ocp, rti_step, sqp_solve
from oracles import condensed_lq, double_integrator

pytestmark = pytest.mark.acceptance


def naive_posterior(lam, Phi, y, sw):
    cov = np.linalg.inv(Phi.T @ Phi / sw**2 + np.diag(1.0 / lam))
    return cov @ Phi.T @ y / sw**2, cov


def test_criterion_1_posterior_matches_explicit_inverse(record_criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        F, N = rng.integers(1, 11), rng.integers(1, 51)
        lam, sw = rng.uniform(0.1, 10.0, F), rng.uniform(0.1, 1.0)
        Phi, y = rng.normal(size=(N, F)), rng.normal(size=N)
        post = posterior_update(PriorSpec(lam), Phi, y, sw)
        mean, cov = naive_posterior(lam, Phi, y, sw)
        worst = max(worst, np.abs(post.mean - mean).max(), np.abs(post.covariance - cov).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5
    record_criterion(1, ok, f"max abs error {worst:.2e} over 100 instances, {elapsed:.2f} s")
    assert ok


def test_criterion_2_kalman_equals_batch_posterior(record_criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        F, N = rng.integers(1, 11), rng.integers(1, 51)
        lam, sw = rng.uniform(0.1, 10.0, F), rng.uniform(0.1, 1.0)
        Phi, y = rng.normal(size=(N, F)), rng.normal(size=N)
        state = init_adapter(PriorSpec(lam), 0.0, sw**2)
        for phi, v in zip(Phi, y):
            state = kalman_step(state, phi, v)
        post = posterior_update(PriorSpec(lam), Phi, y, sw)
        worst = max(worst, np.abs(state.mean - post.mean).max(), np.abs(state.cov - post.covariance).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 5
    record_criterion(2, ok, f"max abs error {worst:.2e} over 50 instances, {elapsed:.2f} s")
    assert ok


def test_criterion_3_gradient_audits(record_criterion):
    t0 = time.perf_counter()
    audit = run_gradcheck(0)
    code = cli.main(["gradcheck"])
    elapsed = time.perf_counter() - t0
    g, j = audit["max_gradient_error"], audit["max_jacobian_error"]
    ok = g <= 1e-4 and j <= 1e-5 and code == 0 and elapsed < 30
    record_criterion(3, ok, f"gradient {g:.2e}, jacobian {j:.2e}, gradcheck exit {code}, {elapsed:.1f} s")
    assert ok


def test_criterion_4_lqr_equivalence(record_criterion):
    t0 = time.perf_counter()
    dt, N = 0.02, 20
    ref = lambda t: np.stack([np.full_like(np.asarray(t, float), 0.5), 0 * np.asarray(t, float)], -1)
    cost = CostSpec(Q=np.diag([100.0, 1.0]), R=[[0.1]], Qf=np.diag([200.0, 2.0]), reference=ref)
    ocp = build_ocp(pl.vertical_load(), None, cost, N * dt, dt)
    x0 = np.array([0.1, -0.2])
    sol = sqp_solve(ocp, x0)
    A, B, c = double_integrator(dt, gravity=9.81)
    xs, us = condensed_lq(A, B, c, x0, ref(dt * np.arange(N + 1)), cost.Q, cost.R, cost.Qf, dt)
    err = max(np.abs(sol.inputs - us).max(), np.abs(sol.states - xs).max())

    warm = WarmStart(np.tile(x0, (N + 1, 1)), np.zeros((N, 1)))
    for calls in range(1, 21):
        _, _, diag = rti_step(ocp, x0, warm)
        warm = WarmStart(diag["states"], diag["inputs"])
        rti_err = np.abs(warm.inputs - sol.inputs).max()
        if rti_err < 1e-9:
            break
    elapsed = time.perf_counter() - t0
    ok = sol.iterations == 1 and err <= 1e-6 and rti_err < 1e-9 and elapsed < 5
    record_criterion(4, ok, f"oracle error {err:.2e} in {sol.iterations} iteration, "
                            f"RTI fixed point after {calls} calls ({rti_err:.1e}), {elapsed:.2f} s")
    assert ok


def test_criterion_5_planted_model(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    omega, lam, sw = np.array([[1.5]]), np.array([4.0, 4.0]), 0.05
    planted = FeatureModel.from_frequencies(omega)
    datasets = []
    for m in range(4):
        K = rng.normal(0.0, 2.0, 2)
        Z = rng.uniform(-0.25, 0.75, (200, 1))
        datasets.append(TaskDataset(f"p{m}", Z, eval_features(planted, Z) @ K + sw * rng.standard_normal(200)))
    splits = [split_dataset(D) for D in datasets]
    gen_nll = nll_objective(Hyperparams(omega, np.log(lam), np.full(4, np.log(sw))), splits)
    fit = fit_hyperparams(datasets, 1, OptimizerConfig(restarts=8, seed=0))
    rel = abs(fit.objective - gen_nll) / abs(gen_nll)

    # closed loop on an unseen weight vector of the same planted family
    hp = fit.hyperparams
    study = builtin_study("sinusoid_study", noise_std=sw, n_seeds=5)
    plant = study.build_plant()
    K_new = np.array([1.8, -1.2])
    truth = lambda z: (eval_features(planted, z) @ K_new)[..., None]
    ocp = build_ocp(plant, hp.feature_model(), study.cost_spec(), study.horizon, study.dt)
    ctrl = Controller(Baseline("MultiTask"), ocp, hp.feature_model(), hp.prior())
    batch = simulate(study, plant, truth, ctrl, range(5), "planted")
    err = batch.predictions - batch.measurement_truth
    half = err.shape[1] // 2
    rmse = np.sqrt(np.nanmean(err[:, half:] ** 2, axis=1))
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.05 and rmse.max() < 2 * sw and not batch.failed.any() and elapsed < 120
    record_criterion(5, ok, f"NLL fitted {fit.objective:.4f} vs generating {gen_nll:.4f} ({100 * rel:.1f}%), "
                            f"worst second-half RMSE {rmse.max():.4f} < {2 * sw}, {elapsed:.0f} s")
    assert ok


def test_criterion_6_sinusoid_ordering(record_criterion, tmp_path):
    t0 = time.perf_counter()
    study = builtin_study("sinusoid_study")
    report = run_benchmark(study, train=True, out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    v = report.verdicts
    keys = ["task1_adaptive_beat_nominal", "task2_multitask_beats_nominal_offset_single1",
            "task4_multitask_band_narrower_than_single1"]
    ok = all(v[k]["pass"] for k in keys) and elapsed < 15 * 60
    detail = ", ".join(f"{k.split('_')[0]} {'ok' if v[k]['pass'] else 'no'}" for k in keys)
    record_criterion(6, ok, f"{detail} (MT task4 band {v[keys[2]]['multitask_band']:.3f} vs "
                            f"{v[keys[2]]['single1_band']:.3f}), {elapsed / 60:.1f} min")
    assert ok


def test_criterion_7_sinexp_ordering(record_criterion, tmp_path):
    t0 = time.perf_counter()
    study = builtin_study("sinexp_study")
    report = run_benchmark(study, train=True, out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    (task,) = study.eval_tasks
    v = report.verdicts
    mt, nn = v[f"{task}_MultiTask_below_quarter_of_nominal"], v[f"{task}_NeuralNetwork_below_quarter_of_nominal"]
    quantiles = all(np.isfinite([report.cell(b, task).q25, report.cell(b, task).q75]).all()
                    for b in ("MultiTask", "NeuralNetwork"))
    ok = mt["pass"] and nn["pass"] and quantiles and elapsed < 30 * 60
    record_criterion(7, ok, f"regret/nominal MultiTask {mt['ratio']:.3f}, NeuralNetwork {nn['ratio']:.3f} "
                            f"(< 0.25), {elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_door_divergence(record_criterion, tmp_path):
    t0 = time.perf_counter()
    study = builtin_study("door_study")
    report = run_benchmark(study, train=True, out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    (v,) = [v for k, v in report.verdicts.items() if k.endswith("_offset_drifts_multitask_settles")]
    ok = v["pass"] and elapsed < 5 * 60
    record_criterion(8, ok, f"offset drift {v['offset_drift']:.3g}, multitask drift {v['multitask_drift']:.3g} "
                            f"(ratio {v['drift_ratio']:.2f}, need > 10), multitask settle "
                            f"{v['multitask_settle_ratio']:.3f} (need < 0.05), {elapsed / 60:.1f} min")
    assert ok


def test_criterion_9_determinism_and_round_trip(record_criterion, tmp_path):
    t0 = time.perf_counter()
    d = builtin_study_dict("sinusoid_study")
    d.update({"duration": 3.0, "n_seeds": 3, "horizon": 0.5, "train_tasks": ["task1", "task2"],
              "eval_tasks": ["task2"],
              "baselines": ["Nominal", "OffsetCompensation", "SingleTask:task1", "MultiTask"], "optimizer": {"iterations": 60, "restarts": 2, "init_scale": 2.0}})
    study = study_from_dict(d)

    def pipeline(out):
        arts = train_study(study, collect_study(study))
        run_benchmark(study, artifacts=arts, out_dir=out)
        return arts, (out / "results.csv").read_bytes()

    arts_a, csv_a = pipeline(tmp_path / "a")
    arts_b, csv_b = pipeline(tmp_path / "b")
    same_models = all(arts_a[k].to_json() == arts_b[k].to_json() for k in arts_a)
    round_trip = all(ModelArtifact.from_json(a.to_json()).to_json() == a.to_json() for a in arts_a.values())
    elapsed = time.perf_counter() - t0
    ok = same_models and csv_a == csv_b and round_trip and elapsed < 60
    record_criterion(9, ok, f"models identical {same_models}, results identical {csv_a == csv_b}, "
                            f"round trip {round_trip}, {elapsed:.0f} s")
    assert ok
