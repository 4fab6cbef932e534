"""Seeded closed-loop rollouts of the baseline controllers.

One call simulates a batch of independent seeds in lockstep: the MPC and
the adapters are batched along a leading seed axis, the plant is integrated
for every seed at once. Each seed draws its measurement noise from its own
generator, so results do not depend on how seeds are grouped into batches.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import adapt
from .. import plant as pl
from ..errors import ConfigurationError, InvalidArgumentError
from ..features import FeatureModel, PriorSpec, eval_features
from ..mpc import OcpSpec, WarmStart, build_ocp, rti_step, sqp_solve
from .artifacts import ModelArtifact
from .config import Baseline, StudyConfig

@dataclass
class Controller:
    """An MPC baseline ready to run: its OCP and, if adaptive, its prior."""

    baseline: Baseline
    ocp: OcpSpec
    feature: FeatureModel | None = None
    prior: PriorSpec | None = None

    @property
    def adaptive(self) -> bool:
        return self.feature is not None


def make_controller(study: StudyConfig, plant: pl.PlantSpec, task: pl.DisturbanceTask | None,
                    baseline: Baseline, artifact: ModelArtifact | None) -> Controller:
    cost = study.cost_spec()
    if baseline.kind == "Nominal":
        return Controller(baseline, build_ocp(plant, None, cost, study.horizon, study.dt))
    if baseline.kind == "GroundTruth":
        if task is None:
            raise ConfigurationError("the GroundTruth baseline needs the simulated task")
        return Controller(baseline, build_ocp(plant, task, cost, study.horizon, study.dt))
    if artifact is None:
        raise ConfigurationError(
            f"baseline {baseline.label} needs a trained model artifact; run `mtmpc train --config <study>` first")
    if artifact.plant_kind != plant.kind.value:
        raise ConfigurationError(f"artifact {artifact.name} was trained on {artifact.plant_kind}")
    ocp = build_ocp(plant, artifact.feature, cost, study.horizon, study.dt)
    return Controller(baseline, ocp, artifact.feature, artifact.prior())


def offset_artifact(study: StudyConfig, plant: pl.PlantSpec) -> ModelArtifact:
    """The offset-compensation model: a constant feature with a fixed prior."""
    return ModelArtifact(
        name="offset", baseline="OffsetCompensation", plant_kind=plant.kind.value,
        channels=list(plant.error_indices), feature=FeatureModel.constant(plant.location_dim),
        log_lambdas=np.log([study.adapter.offset_prior]),
        log_sigma_w=np.log([max(study.noise_std, 1e-4)]), task_ids=[],
        config_digest=study.training_digest())


@dataclass
class RolloutBatch:
    """Per-seed results of one (baseline, task) cell; arrays lead with the seed axis."""

    seeds: list[int]
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (S, K+1, n)
    inputs: np.ndarray  # (S, K, m)
    true_residuals: np.ndarray  # (S, K) at (x_k, u_k), first error channel
    costs: np.ndarray  # (S,)
    failed: np.ndarray  # (S,) bool
    saturated: np.ndarray  # (S,) bool
    adapter_mean: np.ndarray | None = None  # (S, K, F) after the update at step k
    adapter_trace: np.ndarray | None = None  # (S, K)
    measurements: np.ndarray | None = None  # (S, K) y formed at step k (nan if none)
    predictions: np.ndarray | None = None  # (S, K) phi . K before the update
    measurement_truth: np.ndarray | None = None  # (S, K) noise-free residual at z
    sigma_R: np.ndarray | None = None  # (S,)
    kkt: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (S, K)
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (S, K)
    wall_time: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (K,)

    def trajectory(self, i: int) -> pl.Trajectory:
        return pl.Trajectory(self.times, self.states[i], self.inputs[i],
                             self.true_residuals[i], bool(self.saturated[i]))


def noise_generator(study: StudyConfig, task_id: str, seed: int) -> np.random.Generator:
    """Measurement-noise stream of one (task, seed); shared by every baseline."""
    return np.random.default_rng([study.seed, int(seed), zlib.crc32(task_id.encode())])


def simulate(study: StudyConfig, plant: pl.PlantSpec, truth: Callable, controller: Controller,
             seeds, noise_key: str, callback: Callable | None = None) -> RolloutBatch:
    """Closed loop of ``controller`` on the plant whose residual is ``truth(z)``.

    Every control period: form the residual measurement from the last
    interval, update the adapter, take one RTI step (a full SQP solve at
    the first period) and integrate the true plant with RK4.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise InvalidArgumentError("need at least one seed")
    S = len(seeds)
    sched = study.schedule()
    dt = sched.dt
    K = sched.n_steps
    n, m = plant.state_dim, plant.input_dim
    ocp = controller.ocp
    cost = ocp.cost
    j = plant.error_indices[0]
    ad = study.adapter
    door_meas = ad.measurement == "accel_estimator"

    gens = [noise_generator(study, noise_key, s) for s in seeds]
    if door_meas:
        noise = np.stack([g.standard_normal((K + 1, 2)) for g in gens]) * np.asarray(ad.meas_noise)
    else:
        noise = np.stack([g.standard_normal(K + 1) for g in gens]) * study.noise_std

    def true_flow(x, u):
        f = pl.nominal_flow(plant, x, u)
        f[..., list(plant.error_indices)] += truth(pl.input_location(plant, x, u))
        return f

    x = np.zeros((S, n))
    xs = np.zeros((S, K + 1, n))
    us = np.zeros((S, K, m))
    e_true = np.zeros((S, K))
    xs[:, 0] = x
    failed = np.zeros(S, dtype=bool)
    saturated = np.zeros(S, dtype=bool)
    kkt_hist = np.zeros((S, K))
    alpha_hist = np.zeros((S, K))
    wall = np.zeros(K)

    adaptive = controller.adaptive
    F = controller.feature.feature_dim if adaptive else 0
    n_e = plant.n_errors
    theta = None
    kstate = None
    sigma_R = None
    if adaptive:
        means = np.zeros((S, K, F))
        traces = np.zeros((S, K))
        meas = np.full((S, K), np.nan)
        preds = np.full((S, K), np.nan)
        meas_true = np.full((S, K), np.nan)
        theta = np.zeros((S, n_e, F))
        fixed_R = study.sigma_R_value()
        pending = []  # buffered (phi, y) until sigma_R is estimated
        if fixed_R is not None:
            kstate = adapt.batch_adapter(adapt.init_adapter(controller.prior, ad.sigma_Q, fixed_R), S)
            sigma_R = np.full(S, fixed_R)
    if door_meas:
        est = adapt.init_accel_estimator(ad.q_jerk, np.square(ad.meas_noise) + 1e-12)
        est = adapt.AccelEstimatorState(np.zeros((S, 3)), np.broadcast_to(est.cov, (S, 3, 3)).copy(),
                                        est.q_jerk, est.r_meas)

    hover = WarmStart(np.zeros((S, ocp.horizon_steps + 1, n)),
                      np.broadcast_to(plant.hover_input(), (S, ocp.horizon_steps, m)).copy())
    warm = None
    total = np.zeros(S)

    for k in range(K):
        t = k * dt
        # 1. residual measurement for the interval that just ended
        if door_meas:
            est = adapt.accel_estimator_step(est, x + noise[:, k], dt)
        if adaptive and k >= 1:
            u_prev = us[:, k - 1]
            if door_meas:
                xhat = est.state[:, :2]
                acc = est.state[:, 2]
                z = pl.input_location(plant, xhat, u_prev)
                y = acc - pl.nominal_flow(plant, xhat, u_prev)[:, j]
            else:
                x_prev = xs[:, k - 1]
                xmid = 0.5 * (x_prev + x)
                z = pl.input_location(plant, xmid, u_prev)
                y = (x[:, j] - x_prev[:, j]) / dt - pl.nominal_flow(plant, xmid, u_prev)[:, j] + noise[:, k]
            y = np.where(failed, 0.0, y)
            phi = eval_features(controller.feature, z)
            meas[:, k] = y
            meas_true[:, k] = truth(z)[:, 0]
            if kstate is None:
                pending.append((phi, y))
                if len(pending) >= ad.batch_size:
                    Phi = np.stack([p for p, _ in pending], axis=1)
                    Y = np.stack([v for _, v in pending], axis=1)
                    sigma_R = np.array([adapt.estimate_measurement_noise((Phi[s], Y[s]), controller.prior)
                                        for s in range(S)])
                    kstate = adapt.batch_adapter(
                        adapt.init_adapter(controller.prior, ad.sigma_Q, 1.0), S)
                    kstate = adapt.KalmanAdapterState(kstate.mean, kstate.cov, ad.sigma_Q, sigma_R)
                    for p, v in pending:
                        kstate = adapt.kalman_step(kstate, p, v)
                    pending = []
            else:
                preds[:, k] = np.einsum("sf,sf->s", phi, kstate.mean)
                kstate = adapt.kalman_step(kstate, phi, y)
            if kstate is not None:
                theta = np.broadcast_to(kstate.mean[:, None, :], (S, n_e, F)).copy()
                means[:, k] = kstate.mean
                traces[:, k] = np.trace(kstate.cov, axis1=-2, axis2=-1)

        # 2. control
        tic = time.perf_counter()
        if warm is None:
            sol = sqp_solve(ocp, x, init=hover, theta=theta, t0=t, raise_on_failure=False)
            u = sol.inputs[:, 0].copy()
            warm = WarmStart(sol.states, sol.inputs).shifted()
            kkt_hist[:, k] = sol.kkt_residual
            alpha_hist[:, k] = 1.0
            step_failed = np.asarray(sol.failed)
        else:
            u, warm, diag = rti_step(ocp, x, warm, theta=theta, t0=t)
            kkt_hist[:, k] = diag["kkt_residual"]
            alpha_hist[:, k] = diag["alpha"]
            step_failed = diag["failed"]
        wall[k] = time.perf_counter() - tic
        step_failed = step_failed | ~np.all(np.isfinite(u), axis=-1)
        if step_failed.any():
            _reset(step_failed, u, warm, hover, plant)
        failed |= step_failed
        us[:, k] = u
        e_true[:, k] = truth(pl.input_location(plant, x, u))[:, 0]
        total += cost.stage(x, u, t) * dt

        # 3. plant
        with np.errstate(all="ignore"):
            x_next = _rk4(true_flow, x, u, dt)
        x_next, bad = pl.clamp_to_box(plant, x_next)
        if bad.any():
            saturated |= bad
            failed |= bad
            _reset(bad, u, warm, hover, plant)
        x = x_next
        xs[:, k + 1] = x
        if callback is not None:
            callback(k, t, x, u, kkt_hist[:, k])

    costs = np.where(failed, np.nan, total)
    out = RolloutBatch(seeds, dt * np.arange(K + 1), xs, us, e_true, costs, failed, saturated,
                       kkt=kkt_hist, alpha=alpha_hist, wall_time=wall)
    if adaptive:
        out.adapter_mean, out.adapter_trace = means, traces
        out.measurements, out.predictions, out.measurement_truth = meas, preds, meas_true
        out.sigma_R = sigma_R if sigma_R is not None else np.full(S, np.nan)
    return out


def _rk4(flow, x, u, dt):
    # like plant.step_rk4 but tolerant of non-finite states, which clamp_to_box flags per seed
    k1 = flow(x, u)
    k2 = flow(x + 0.5 * dt * k1, u)
    k3 = flow(x + 0.5 * dt * k2, u)
    k4 = flow(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _reset(mask, u, warm, hover, plant):
    """Neutralise failed seeds so their NaNs cannot leak into the batch."""
    u[mask] = plant.hover_input()
    warm.states[mask] = hover.states[mask]
    warm.inputs[mask] = hover.inputs[mask]


def task_truth(task: pl.DisturbanceTask) -> Callable:
    return lambda z: pl.residual(task, z)


def run_cell(study: StudyConfig, plant: pl.PlantSpec, task: pl.DisturbanceTask, baseline: Baseline,
             artifact: ModelArtifact | None, seeds, callback=None) -> RolloutBatch:
    pl.check_compatible(plant, task)
    ctrl = make_controller(study, plant, task, baseline, artifact)
    return simulate(study, plant, task_truth(task), ctrl, seeds, task.task_id, callback)


def run_closed_loop(plant: pl.PlantSpec, task: pl.DisturbanceTask, baseline: Baseline,
                    model_artifact: ModelArtifact | None, study: StudyConfig, seed: int
                    ) -> tuple[pl.Trajectory, float]:
    """One seeded rollout; returns the trajectory and the accumulated cost.

    A failed run (solver failure or state-box saturation) returns a ``nan``
    cost and a trajectory flagged ``saturated`` when the box was left.
    """
    batch = run_cell(study, plant, task, baseline, model_artifact, [seed])
    return batch.trajectory(0), float(batch.costs[0])


def cost_regret(baseline_cost: float, groundtruth_cost: float) -> float:
    """Signed regret of a baseline against the ground-truth-model controller."""
    if not (np.isfinite(baseline_cost) and np.isfinite(groundtruth_cost)):
        raise InvalidArgumentError("cost regret needs two finite costs")
    return float(baseline_cost) - float(groundtruth_cost)


__all__ = ["Controller", "RolloutBatch", "cost_regret", "make_controller", "noise_generator",
           "offset_artifact", "run_cell", "run_closed_loop", "simulate", "task_truth"]
