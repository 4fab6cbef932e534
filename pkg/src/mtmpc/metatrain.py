"""Multi-task hyperparameter learning for the residual model.

Each task dataset is split into a training half, used to form the weight
posterior, and a validation half, on which the Gaussian predictive density
is scored. The averaged negative log predictive density over tasks is
minimised over the shared frequencies, the shared prior variances and one
noise level per task.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from . import plant as pl
from .errors import InvalidArgumentError, NumericError, OptimizationFailed
from .features import FeatureModel, MlpWeights, PriorSpec

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass
class TaskDataset:
    task_id: str
    inputs: np.ndarray  # (N, d)
    targets: np.ndarray  # (N,)
    channel: int = 1
    diverged: bool = False

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise InvalidArgumentError(
                f"task {self.task_id}: {self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets"
            )

    def __len__(self):
        return self.targets.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "channel": self.channel, "diverged": self.diverged,
                "inputs": self.inputs.tolist(), "targets": self.targets.tolist()}

    @classmethod
    def from_dict(cls, d) -> "TaskDataset":
        return cls(d["task_id"], np.asarray(d["inputs"], dtype=float),
                   np.asarray(d["targets"], dtype=float), int(d.get("channel", 1)),
                   bool(d.get("diverged", False)))


@dataclass
class SplitDataset:
    train: TaskDataset
    validation: TaskDataset


@dataclass
class Hyperparams:
    """Shared frequencies (E, d), log prior variances (2E,), log noise std per task (M,)."""

    frequencies: np.ndarray
    log_lambdas: np.ndarray
    log_sigma_w: np.ndarray

    def __post_init__(self):
        self.frequencies = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        self.log_lambdas = np.asarray(self.log_lambdas, dtype=float).reshape(-1)
        self.log_sigma_w = np.asarray(self.log_sigma_w, dtype=float).reshape(-1)
        if self.log_lambdas.shape[0] != 2 * self.frequencies.shape[0]:
            raise InvalidArgumentError("need exactly two prior variances per frequency")

    @property
    def n_frequencies(self) -> int:
        return self.frequencies.shape[0]

    def feature_model(self) -> FeatureModel:
        return FeatureModel.from_frequencies(self.frequencies)

    def prior(self) -> PriorSpec:
        return PriorSpec(np.exp(self.log_lambdas))

    @property
    def sigma_w(self) -> np.ndarray:
        return np.exp(self.log_sigma_w)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.frequencies.ravel(), self.log_lambdas, self.log_sigma_w])

    def unflatten(self, vec) -> "Hyperparams":
        vec = np.asarray(vec, dtype=float)
        nf = self.frequencies.size
        nl = self.log_lambdas.size
        return Hyperparams(vec[:nf].reshape(self.frequencies.shape), vec[nf:nf + nl], vec[nf + nl:])


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-2
    iterations: int = 2000
    restarts: int = 8
    seed: int = 0
    sigma_floor: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    init_scale: float = 1.0  # frequency init std, in units of 1/(input range)

    @classmethod
    def from_dict(cls, d) -> "OptimizerConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# Data collection and splitting


def collect_dataset(
    plant: pl.PlantSpec,
    task: pl.DisturbanceTask,
    controller: Callable,
    schedule: pl.ReferenceSchedule,
    noise_std: float,
    seed: int,
) -> TaskDataset:
    """Roll out ``controller`` on the true plant and record noisy residuals.

    ``controller(t, x) -> u``; if it has a ``reset()`` method it is called first.
    The target for sample i is the error-row difference between the true and
    the nominal flow at ``(x_i, u_i)`` plus N(0, noise_std**2) noise.
    """
    pl.check_compatible(plant, task)
    rng = np.random.default_rng(seed)
    if hasattr(controller, "reset"):
        controller.reset()
    j = plant.error_indices[0]
    dt = schedule.dt
    x = np.zeros(plant.state_dim)
    locs, targets = [], []
    diverged = False
    for k in range(schedule.n_steps):
        t = k * dt
        u = np.asarray(controller(t, x), dtype=float).reshape(plant.input_dim)
        e = pl.true_flow(plant, task, x, u)[j] - pl.nominal_flow(plant, x, u)[j]
        locs.append(pl.input_location(plant, x, u))
        targets.append(e + noise_std * rng.standard_normal())
        try:
            x = pl.step_rk4(lambda xx, uu: pl.true_flow(plant, task, xx, uu), x, u, dt, t=t)
        except NumericError:
            diverged = True
            break
        _, bad = pl.clamp_to_box(plant, x)
        if bad:
            diverged = True
            break
    if diverged:
        log.warning("collection on task %s diverged after %d samples", task.task_id, len(targets))
    return TaskDataset(task.task_id, np.array(locs).reshape(len(targets), -1), np.array(targets),
                       channel=j, diverged=diverged)


def split_dataset(D: TaskDataset) -> SplitDataset:
    """Even time indices go to training, odd ones to validation."""
    if len(D) < 4:
        raise InvalidArgumentError(f"task {D.task_id}: need at least 4 samples to split, got {len(D)}")
    tr = TaskDataset(D.task_id, D.inputs[0::2], D.targets[0::2], D.channel, D.diverged)
    va = TaskDataset(D.task_id, D.inputs[1::2], D.targets[1::2], D.channel, D.diverged)
    return SplitDataset(tr, va)


# ---------------------------------------------------------------------------
# Objective


def _task_nll(Pt, yt, Pv, yv, lam, s, need_grad=True):
    """Mean validation NLL of one task and its gradient.

    ``lam`` are prior variances and ``s`` the noise variance. Returns
    ``(value, dPt, dPv, dlog_lambdas, dlog_sigma)`` where the last entry is
    the derivative w.r.t. the log noise *std*.
    """
    F = lam.shape[0]
    A = np.diag(1.0 / lam) + Pt.T @ Pt / s
    try:
        cf = linalg.cho_factor(A, lower=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError("posterior precision is not positive definite or not finite") from exc
    Sigma = linalg.cho_solve(cf, np.eye(F))
    Sigma = 0.5 * (Sigma + Sigma.T)
    b = Pt.T @ yt / s
    mu = Sigma @ b
    PS = Pv @ Sigma
    v = s + np.einsum("ij,ij->i", PS, Pv)
    r = yv - Pv @ mu
    Nv = yv.shape[0]
    value = float(np.mean(0.5 * (LOG_2PI + np.log(v)) + 0.5 * r**2 / v))
    if not need_grad:
        return value, None, None, None, None

    gm = -r / (v * Nv)
    gv = (0.5 / v - 0.5 * r**2 / v**2) / Nv
    dPv = gm[:, None] * mu[None, :] + 2.0 * gv[:, None] * PS
    dmu = Pv.T @ gm
    dSigma = (Pv * gv[:, None]).T @ Pv + np.outer(dmu, b)
    db = Sigma @ dmu
    ds = gv.sum()
    dA = -Sigma @ dSigma @ Sigma
    dPt = np.outer(yt, db) / s
    ds -= (b @ db) / s
    dlam = -np.diag(dA) / lam**2
    dPt += Pt @ (dA + dA.T) / s
    ds -= np.sum(dA * (Pt.T @ Pt)) / s**2
    return value, dPt, dPv, dlam * lam, ds * 2.0 * s


def _trig(Z, Om):
    ang = 2 * np.pi * (Z @ Om.T)
    return ang, np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _trig_back(Z, ang, dPhi):
    E = ang.shape[1]
    g = dPhi[:, :E] * np.cos(ang) - dPhi[:, E:] * np.sin(ang)
    return 2 * np.pi * (g.T @ Z)


def _check_splits(hp: Hyperparams, splits: Sequence[SplitDataset]):
    if len(splits) != hp.log_sigma_w.shape[0]:
        raise InvalidArgumentError(
            f"{len(splits)} task splits but {hp.log_sigma_w.shape[0]} noise levels"
        )
    if not splits:
        raise InvalidArgumentError("need at least one task")


def nll_value_and_gradient(hp: Hyperparams, splits: Sequence[SplitDataset], need_grad=True):
    _check_splits(hp, splits)
    M = len(splits)
    lam = np.exp(hp.log_lambdas)
    Om = hp.frequencies
    total = 0.0
    g_om = np.zeros_like(Om)
    g_ll = np.zeros_like(hp.log_lambdas)
    g_ls = np.zeros_like(hp.log_sigma_w)
    for m, sp in enumerate(splits):
        s = math.exp(2.0 * hp.log_sigma_w[m])
        ang_t, Pt = _trig(sp.train.inputs, Om)
        ang_v, Pv = _trig(sp.validation.inputs, Om)
        try:
            val, dPt, dPv, dll, dls = _task_nll(Pt, sp.train.targets, Pv, sp.validation.targets,
                                                lam, s, need_grad)
        except NumericError as exc:
            raise NumericError(f"task {sp.train.task_id}: {exc}") from exc
        total += val / M
        if need_grad:
            g_om += (_trig_back(sp.train.inputs, ang_t, dPt)
                     + _trig_back(sp.validation.inputs, ang_v, dPv)) / M
            g_ll += dll / M
            g_ls[m] = dls / M
    grad = Hyperparams(g_om, g_ll, g_ls) if need_grad else None
    return total, grad


def nll_objective(hp: Hyperparams, splits: Sequence[SplitDataset]) -> float:
    """Averaged negative log predictive density over the validation halves."""
    return nll_value_and_gradient(hp, splits, need_grad=False)[0]


def nll_gradient(hp: Hyperparams, splits: Sequence[SplitDataset]) -> Hyperparams:
    """Analytic gradient of :func:`nll_objective`, packed like the hyperparameters."""
    return nll_value_and_gradient(hp, splits)[1]


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Optimisation


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x, g):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainingResult:
    objective: float
    init_objectives: list[float]
    traces: list[list[float]] = field(default_factory=list)
    best_restart: int = 0
    sigma_floor_active: list[bool] = field(default_factory=list)


@dataclass
class TrigTrainingResult(TrainingResult):
    hyperparams: Hyperparams | None = None


def _check_datasets(datasets: Sequence[TaskDataset]):
    if not datasets:
        raise InvalidArgumentError("need at least one task dataset")
    d = datasets[0].input_dim
    ch = datasets[0].channel
    for D in datasets:
        if D.input_dim != d or D.channel != ch:
            raise InvalidArgumentError("all datasets must share the error channel and input dimension")
        if not (np.all(np.isfinite(D.inputs)) and np.all(np.isfinite(D.targets))):
            raise InvalidArgumentError(f"task {D.task_id}: dataset contains non-finite values")
    return d


def _init_log_sigma(datasets, floor):
    return np.array([0.5 * math.log(max(float(np.var(D.targets)), floor**2)) for D in datasets])


def _descend(fun, x0, cfg: OptimizerConfig, project):
    """Adam on ``fun(x) -> (value, grad)``; returns best point seen and the trace."""
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    x = project(x0)
    best_x, best_f = x, math.inf
    trace = []
    for _ in range(cfg.iterations):
        try:
            f, g = fun(x)
        except NumericError:
            break
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            break
        trace.append(f)
        if f < best_f:
            best_f, best_x = f, x
        x = project(opt.step(x, g))
    else:
        try:
            f, _ = fun(x)
            if math.isfinite(f) and f < best_f:
                best_f, best_x = f, x
                trace.append(f)
        except NumericError:
            pass
    return best_x, best_f, trace


def fit_hyperparams(datasets: Sequence[TaskDataset], E: int, config: OptimizerConfig | None = None
                    ) -> TrigTrainingResult:
    """Multi-start Adam on the multi-task NLL; returns the best restart."""
    cfg = config or OptimizerConfig()
    if E < 1:
        raise InvalidArgumentError("E must be >= 1")
    d = _check_datasets(datasets)
    splits = [split_dataset(D) for D in datasets]
    allz = np.concatenate([D.inputs for D in datasets])
    span = allz.max(axis=0) - allz.min(axis=0)
    span = np.where(span > 1e-9, span, 1.0)
    floor = math.log(cfg.sigma_floor)
    template = Hyperparams(np.zeros((E, d)), np.zeros(2 * E), np.zeros(len(datasets)))
    nf = E * d + 2 * E

    def fun(vec):
        f, g = nll_value_and_gradient(template.unflatten(vec), splits)
        return f, g.flatten()

    def project(vec):
        vec = vec.copy()
        vec[nf:] = np.maximum(vec[nf:], floor)
        return vec

    best = None
    inits, traces = [], []
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        hp0 = Hyperparams(cfg.init_scale * rng.standard_normal((E, d)) / span, np.zeros(2 * E),
                          _init_log_sigma(datasets, cfg.sigma_floor))
        x0 = project(hp0.flatten())
        try:
            inits.append(fun(x0)[0])
        except NumericError:
            inits.append(math.inf)
        x, f, trace = _descend(fun, x0, cfg, project)
        traces.append(trace)
        log.debug("restart %d: init %.5g -> best %.5g", r, inits[-1], f)
        if math.isfinite(f) and (best is None or f < best[1]):
            best = (r, f, x)
    if best is None:
        raise OptimizationFailed("all restarts diverged", traces)
    r, f, x = best
    hp = template.unflatten(x)
    active = list(np.isclose(hp.log_sigma_w, floor))
    if any(active):
        log.info("noise floor %.1e active for tasks %s", cfg.sigma_floor,
                 [datasets[i].task_id for i, a in enumerate(active) if a])
    return TrigTrainingResult(f, inits, traces, r, active, hyperparams=hp)


def optimize_hyperparams(datasets: Sequence[TaskDataset], E: int,
                         config: OptimizerConfig | None = None) -> Hyperparams:
    return fit_hyperparams(datasets, E, config).hyperparams


# ---------------------------------------------------------------------------
# Neural-network features trained under the same objective


def _mlp_forward(params, Z):
    W1, b1, W2, b2, W3, b3 = params
    h1 = np.tanh(Z @ W1.T + b1)
    h2 = np.tanh(h1 @ W2.T + b2)
    return h1, h2, h2 @ W3.T + b3


def _mlp_backward(params, Z, h1, h2, dOut):
    W1, b1, W2, b2, W3, b3 = params
    dW3 = dOut.T @ h2
    db3 = dOut.sum(axis=0)
    da2 = (dOut @ W3) * (1 - h2**2)
    dW2 = da2.T @ h1
    db2 = da2.sum(axis=0)
    da1 = (da2 @ W2) * (1 - h1**2)
    dW1 = da1.T @ Z
    db1 = da1.sum(axis=0)
    return [dW1, db1, dW2, db2, dW3, db3]


def mlp_nll_value_and_gradient(weights: MlpWeights, log_lambdas, log_sigma_w,
                               splits: Sequence[SplitDataset], need_grad=True):
    """Same objective with MLP features; gradient is (weight grads, dlog_lambdas, dlog_sigma)."""
    params = weights.as_list()
    log_lambdas = np.asarray(log_lambdas, dtype=float)
    log_sigma_w = np.asarray(log_sigma_w, dtype=float)
    M = len(splits)
    if log_sigma_w.shape[0] != M:
        raise InvalidArgumentError(f"{M} task splits but {log_sigma_w.shape[0]} noise levels")
    lam = np.exp(log_lambdas)
    Zs = [sp.train.inputs for sp in splits] + [sp.validation.inputs for sp in splits]
    sizes = np.cumsum([z.shape[0] for z in Zs])[:-1]
    Z = np.concatenate(Zs)
    h1, h2, Phi = _mlp_forward(params, Z)
    blocks = np.split(Phi, sizes)
    dblocks = [None] * (2 * M)
    total = 0.0
    g_ll = np.zeros_like(log_lambdas)
    g_ls = np.zeros_like(log_sigma_w)
    for m, sp in enumerate(splits):
        s = math.exp(2.0 * log_sigma_w[m])
        try:
            val, dPt, dPv, dll, dls = _task_nll(blocks[m], sp.train.targets, blocks[M + m],
                                                sp.validation.targets, lam, s, need_grad)
        except NumericError as exc:
            raise NumericError(f"task {sp.train.task_id}: {exc}") from exc
        total += val / M
        if need_grad:
            dblocks[m] = dPt / M
            dblocks[M + m] = dPv / M
            g_ll += dll / M
            g_ls[m] = dls / M
    if not need_grad:
        return total, None
    dW = _mlp_backward(params, Z, h1, h2, np.concatenate(dblocks))
    return total, (dW, g_ll, g_ls)


@dataclass
class MlpTrainingResult(TrainingResult):
    weights: MlpWeights | None = None
    prior: PriorSpec | None = None
    sigma_w: np.ndarray | None = None


def train_mlp_hyperparams(datasets: Sequence[TaskDataset], arch: tuple[int, int],
                          config: OptimizerConfig | None = None) -> MlpTrainingResult:
    """Adam over network weights, prior variances and noise levels; best of R restarts."""
    cfg = config or OptimizerConfig()
    h, L = (int(a) for a in arch)
    if h < 1 or L < 1:
        raise InvalidArgumentError("MLP hidden width and feature count must be positive")
    d = _check_datasets(datasets)
    splits = [split_dataset(D) for D in datasets]
    M = len(datasets)
    floor = math.log(cfg.sigma_floor)
    shapes = [(h, d), (h,), (h, h), (h,), (L, h), (L,)]
    sizes = [int(np.prod(s)) for s in shapes]
    nw = sum(sizes)

    def unpack(vec):
        parts, i = [], 0
        for shp, n in zip(shapes, sizes):
            parts.append(vec[i:i + n].reshape(shp))
            i += n
        return MlpWeights(*parts), vec[nw:nw + L], vec[nw + L:]

    def fun(vec):
        w, ll, ls = unpack(vec)
        f, (dW, gll, gls) = mlp_nll_value_and_gradient(w, ll, ls, splits)
        return f, np.concatenate([g.ravel() for g in dW] + [gll, gls])

    def project(vec):
        vec = vec.copy()
        vec[nw + L:] = np.maximum(vec[nw + L:], floor)
        return vec

    best = None
    inits, traces = [], []
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r, 7])
        w0 = MlpWeights.init(d, h, L, rng)
        x0 = project(np.concatenate([p.ravel() for p in w0.as_list()]
                                    + [np.zeros(L), _init_log_sigma(datasets, cfg.sigma_floor)]))
        try:
            inits.append(fun(x0)[0])
        except NumericError:
            inits.append(math.inf)
        x, f, trace = _descend(fun, x0, cfg, project)
        traces.append(trace)
        if math.isfinite(f) and (best is None or f < best[1]):
            best = (r, f, x)
    if best is None:
        raise OptimizationFailed("all MLP restarts diverged", traces)
    r, f, x = best
    w, ll, ls = unpack(x)
    return MlpTrainingResult(f, inits, traces, r, list(np.isclose(ls, floor)),
                             weights=w, prior=PriorSpec(np.exp(ll)), sigma_w=np.exp(ls))
