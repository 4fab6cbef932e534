"""Finite-difference audits of the training gradients and the dynamics Jacobians."""

from __future__ import annotations

import numpy as np

from .. import plant as pl
from ..features import FeatureModel, MlpWeights
from ..metatrain import (Hyperparams, TaskDataset, central_difference, mlp_nll_value_and_gradient,
                         nll_gradient, nll_objective, split_dataset)
from ..mpc import Dynamics, LearnedResidual, TaskResidual

GRAD_H = 1e-5
JAC_H = 1e-6


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def _random_splits(rng, M=3, N=40, d=2):
    out = []
    for m in range(M):
        Z = rng.uniform(-1, 1, (N, d))
        y = np.sin(2 * np.pi * Z @ rng.normal(0, 0.7, d)) * rng.normal(0, 2) + 0.1 * rng.standard_normal(N)
        out.append(split_dataset(TaskDataset(f"t{m}", Z, y)))
    return out


def nll_gradient_error(rng: np.random.Generator) -> float:
    splits = _random_splits(rng)
    E, d = 2, 2
    hp = Hyperparams(rng.normal(0, 0.7, (E, d)), rng.normal(0, 0.5, 2 * E),
                     rng.normal(-1, 0.3, len(splits)))
    analytic = nll_gradient(hp, splits).flatten()
    numeric = central_difference(lambda v: nll_objective(hp.unflatten(v), splits), hp.flatten(), GRAD_H)
    return relative_error(analytic, numeric)


def mlp_gradient_error(rng: np.random.Generator) -> float:
    splits = _random_splits(rng, M=2, N=30)
    w = MlpWeights.init(2, 5, 3, rng)
    ll = rng.normal(0, 0.5, 3)
    ls = rng.normal(-1, 0.3, 2)
    params = w.as_list()
    sizes = [p.size for p in params]
    shapes = [p.shape for p in params]

    def unpack(vec):
        parts, i = [], 0
        for shp, n in zip(shapes, sizes):
            parts.append(vec[i:i + n].reshape(shp))
            i += n
        return MlpWeights(*parts), vec[i:i + 3], vec[i + 3:]

    x0 = np.concatenate([p.ravel() for p in params] + [ll, ls])
    _, (dW, gll, gls) = mlp_nll_value_and_gradient(w, ll, ls, splits)
    analytic = np.concatenate([g.ravel() for g in dW] + [gll, gls])
    numeric = central_difference(lambda v: mlp_nll_value_and_gradient(*unpack(v), splits, need_grad=False)[0],
                                 x0, GRAD_H)
    return relative_error(analytic, numeric)


def _dynamics_cases(rng):
    load1 = pl.vertical_load()
    load2 = pl.vertical_load(error_input_indices=(0, 1))
    load_u = pl.vertical_load(error_input_indices=(0, 2))
    door = pl.hinged_door()
    trig2 = FeatureModel.from_frequencies(rng.normal(0, 0.7, (3, 2)))
    mlp2 = FeatureModel.from_mlp(MlpWeights.init(2, 6, 4, rng))
    yield "load/nominal", Dynamics(load1), None
    yield "load/constant", Dynamics(load1, TaskResidual(
        pl.DisturbanceTask("c", pl.TaskFamily.CONSTANT, {"c": -1.6}), 1)), None
    yield "load/sinusoid", Dynamics(load1, TaskResidual(
        pl.DisturbanceTask("s", pl.TaskFamily.SINUSOID, {"amplitude": 3.0, "omega": 4.0}), 1)), None
    yield "load/sinexp", Dynamics(load2, TaskResidual(
        pl.DisturbanceTask("e", pl.TaskFamily.SIN_PLUS_EXP,
                           {"a": 6.0, "b": -8.0, "omega": -3.0, "k": [1.0, 1.0]}), 2)), None
    yield "door/friction", Dynamics(door, TaskResidual(
        pl.DisturbanceTask("d", pl.TaskFamily.DOOR_FRICTION,
                           {"c_v": 0.3, "k_s": 6.0, "mu_f": 0.8, "eps": 0.05, "inertia": 2.0}), 2)), None
    yield "load/trig", Dynamics(load2, LearnedResidual((trig2,))), rng.normal(0, 1, (1, 6))
    yield "load/trig-input", Dynamics(load_u, LearnedResidual((trig2,))), rng.normal(0, 1, (1, 6))
    yield "door/mlp", Dynamics(door, LearnedResidual((mlp2,))), rng.normal(0, 1, (1, 4))
    yield "door/constant", Dynamics(door, LearnedResidual((FeatureModel.constant(2),))), rng.normal(0, 1, (1, 1))


def jacobian_errors(rng: np.random.Generator, n_points: int = 5, dt: float = 0.02) -> dict[str, float]:
    """Relative error of the RK4 step Jacobians against central differences, per model."""
    out = {}
    for name, dyn, theta in _dynamics_cases(rng):
        worst = 0.0
        for _ in range(n_points):
            x = rng.uniform(-0.8, 0.8, 2)
            u = rng.uniform(5, 15, 1) if dyn.plant.kind is pl.PlantKind.VERTICAL_LOAD else rng.uniform(-3, 3, 1)
            _, A, B = dyn.step_jacobians(x, u, dt, theta)
            xu = np.concatenate([x, u])

            def f(v, i):
                return dyn.step(v[:2], v[2:], dt, theta)[i]

            num = np.stack([central_difference(lambda v: f(v, i), xu, JAC_H) for i in range(2)])
            worst = max(worst, relative_error(np.hstack([A, B]), num))
        out[name] = worst
    return out


def run_gradcheck(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    grads = {"nll_trig": nll_gradient_error(rng), "nll_mlp": mlp_gradient_error(rng)}
    jacs = jacobian_errors(rng)
    return {"gradients": grads, "jacobians": jacs,
            "max_gradient_error": max(grads.values()), "max_jacobian_error": max(jacs.values())}
