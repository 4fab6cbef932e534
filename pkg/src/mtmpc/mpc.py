"""Multiple-shooting Gauss-Newton SQP and real-time iteration MPC.

The discrete dynamics are one RK4 step of the nominal flow plus a residual
compensation ``B_e e(z)``. Each SQP iteration linearises the step map at
every shooting node (including the gaps between nodes), solves the
resulting LQ subproblem with a Riccati recursion, and applies the step by a
nonlinear forward rollout of the affine feedback policy with backtracking
on cost. Input bounds are enforced by clamping inside that rollout; state
bounds are soft, ``w * max(0, violation)**2``.

Solver routines accept a leading batch axis on ``x0``, warm starts and
compensation weights, so several independent problems that share an
``OcpSpec`` can be advanced together. Unbatched inputs give unbatched
outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import plant as pl
from .errors import ConfigurationError, InvalidArgumentError, SolverFailure
from .features import FeatureModel, eval_features, feature_jacobian


class ResidualModel(Protocol):
    input_dim: int

    def value(self, z: np.ndarray, theta) -> np.ndarray: ...

    def jacobian(self, z: np.ndarray, theta) -> np.ndarray: ...


@dataclass(frozen=True)
class LearnedResidual:
    """``e_j(z) = phi_j(z) . theta[..., j, :]`` for each error channel j."""

    models: tuple[FeatureModel, ...]

    def __post_init__(self):
        if isinstance(self.models, FeatureModel):
            object.__setattr__(self, "models", (self.models,))
        dims = {m.feature_dim for m in self.models}
        if len(dims) != 1 or len({m.input_dim for m in self.models}) != 1:
            raise InvalidArgumentError("all channel feature models must share their dimensions")

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    @property
    def feature_dim(self) -> int:
        return self.models[0].feature_dim

    def value(self, z, theta):
        theta = np.asarray(theta, dtype=float)
        cols = [np.einsum("...f,...f->...", eval_features(m, z), theta[..., j, :])
                for j, m in enumerate(self.models)]
        return np.stack(cols, axis=-1)

    def jacobian(self, z, theta):
        theta = np.asarray(theta, dtype=float)
        rows = [np.einsum("...fd,...f->...d", feature_jacobian(m, z), theta[..., j, :])
                for j, m in enumerate(self.models)]
        return np.stack(rows, axis=-2)


@dataclass(frozen=True)
class TaskResidual:
    """Exact residual of a simulated task (ground-truth model)."""

    task: pl.DisturbanceTask
    input_dim: int

    def value(self, z, theta=None):
        return pl.residual(self.task, z)

    def jacobian(self, z, theta=None):
        return pl.residual_jacobian(self.task, z)


@dataclass(frozen=True)
class Dynamics:
    plant: pl.PlantSpec
    residual: ResidualModel | None = None

    def __post_init__(self):
        if self.residual is not None and self.residual.input_dim != self.plant.location_dim:
            raise ConfigurationError(
                f"error model reads {self.residual.input_dim}-d locations, plant provides "
                f"{self.plant.location_dim}"
            )

    def flow(self, x, u, theta=None):
        f = pl.nominal_flow(self.plant, x, u)
        if self.residual is not None:
            z = pl.input_location(self.plant, x, u)
            f[..., list(self.plant.error_indices)] += self.residual.value(z, theta)
        return f

    def flow_jacobians(self, x, u, theta=None):
        A, B = pl.nominal_jacobians(self.plant, x, u)
        if self.residual is not None:
            p = self.plant
            z = pl.input_location(p, x, u)
            dedz = self.residual.jacobian(z, theta)  # (..., n_e, d)
            dedxu = dedz @ p.location_selector()
            rows = list(p.error_indices)
            A[..., rows, :] += dedxu[..., :, : p.state_dim]
            B[..., rows, :] += dedxu[..., :, p.state_dim:]
        return A, B

    def step(self, x, u, dt, theta=None):
        h = dt
        k1 = self.flow(x, u, theta)
        k2 = self.flow(x + 0.5 * h * k1, u, theta)
        k3 = self.flow(x + 0.5 * h * k2, u, theta)
        k4 = self.flow(x + h * k3, u, theta)
        return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_jacobians(self, x, u, dt, theta=None):
        """RK4 step and its exact Jacobians by the chain rule through the stages."""
        h = dt
        n = self.plant.state_dim
        I = np.eye(n)
        k1 = self.flow(x, u, theta)
        A1, B1 = self.flow_jacobians(x, u, theta)
        x2 = x + 0.5 * h * k1
        k2 = self.flow(x2, u, theta)
        A2, B2 = self.flow_jacobians(x2, u, theta)
        dk2x = A2 @ (I + 0.5 * h * A1)
        dk2u = A2 @ (0.5 * h * B1) + B2
        x3 = x + 0.5 * h * k2
        k3 = self.flow(x3, u, theta)
        A3, B3 = self.flow_jacobians(x3, u, theta)
        dk3x = A3 @ (I + 0.5 * h * dk2x)
        dk3u = A3 @ (0.5 * h * dk2u) + B3
        x4 = x + h * k3
        k4 = self.flow(x4, u, theta)
        A4, B4 = self.flow_jacobians(x4, u, theta)
        dk4x = A4 @ (I + h * dk3x)
        dk4u = A4 @ (h * dk3u) + B4
        x_next = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        A = I + h / 6.0 * (A1 + 2.0 * dk2x + 2.0 * dk3x + dk4x)
        B = h / 6.0 * (B1 + 2.0 * dk2u + 2.0 * dk3u + dk4u)
        return x_next, A, B


@dataclass(frozen=True)
class CostSpec:
    """Quadratic tracking cost ``0.5 (x - r)' Q (x - r) + 0.5 u' R u`` per unit time.

    ``reference(t)`` maps an array of times to desired states ``(..., n)``.
    ``soft_state_bounds`` is ``(lo, hi, weight)`` with per-state arrays.
    """

    Q: np.ndarray
    R: np.ndarray
    reference: Callable
    Qf: np.ndarray | None = None
    input_bounds: tuple | None = None
    soft_state_bounds: tuple | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
            raise InvalidArgumentError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
            raise InvalidArgumentError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Qf", Q if self.Qf is None else np.atleast_2d(np.asarray(self.Qf, float)))
        if self.input_bounds is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.input_bounds)
            object.__setattr__(self, "input_bounds", (lo, hi))
        if self.soft_state_bounds is not None:
            lo, hi, w = (np.asarray(b, dtype=float) for b in self.soft_state_bounds)
            if np.any(w < 0):
                raise InvalidArgumentError("soft-constraint weights must be non-negative")
            object.__setattr__(self, "soft_state_bounds", (lo, hi, w))

    def stage(self, x, u, t):
        """Running cost rate (without soft penalties), vectorised."""
        ex = x - self.reference(t)
        return 0.5 * np.einsum("...i,ij,...j->...", ex, self.Q, ex) + 0.5 * np.einsum(
            "...i,ij,...j->...", u, self.R, u)


@dataclass(frozen=True)
class OcpSpec:
    horizon_steps: int
    dt: float
    dynamics: Dynamics
    cost: CostSpec
    params: np.ndarray | None = None  # default compensation weights (n_e, F)

    def __post_init__(self):
        if self.horizon_steps < 1 or not self.dt > 0:
            raise InvalidArgumentError("need horizon_steps >= 1 and dt > 0")

    @property
    def state_dim(self) -> int:
        return self.dynamics.plant.state_dim

    @property
    def input_dim(self) -> int:
        return self.dynamics.plant.input_dim


def build_ocp(plant: pl.PlantSpec, error_model, cost_spec: CostSpec, horizon: float, dt: float
              ) -> OcpSpec:
    """Assemble the transcribed OCP.

    ``error_model`` may be ``None`` (nominal model), a ``DisturbanceTask``
    (exact residual), a ``FeatureModel`` or a ``(FeatureModel, weights)``
    pair (learned residual; only the weight mean is used), or any object
    implementing ``ResidualModel``.
    """
    N = int(round(horizon / dt))
    if N < 1 or abs(N * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigurationError(f"horizon {horizon} is not an integer multiple of dt {dt}")
    params = None
    if error_model is None:
        res = None
    elif isinstance(error_model, pl.DisturbanceTask):
        pl.check_compatible(plant, error_model)
        res = TaskResidual(error_model, plant.location_dim)
    elif isinstance(error_model, FeatureModel):
        res = LearnedResidual((error_model,) * plant.n_errors)
    elif isinstance(error_model, tuple) and isinstance(error_model[0], FeatureModel):
        model, K = error_model
        res = LearnedResidual((model,) * plant.n_errors)
        params = np.asarray(K, dtype=float).reshape(plant.n_errors, model.feature_dim)
    else:
        res = error_model
    n = plant.state_dim
    if cost_spec.Q.shape != (n, n) or cost_spec.R.shape != (plant.input_dim, plant.input_dim):
        raise ConfigurationError("cost weight shapes do not match the plant")
    return OcpSpec(N, float(dt), Dynamics(plant, res), cost_spec, params)


def linearize_dynamics(ocp: OcpSpec, x, u, theta=None):
    """Jacobians ``(A, B)`` of the discrete step map at ``(x, u)``."""
    theta = ocp.params if theta is None else theta
    _, A, B = ocp.dynamics.step_jacobians(np.asarray(x, float), np.asarray(u, float), ocp.dt, theta)
    return A, B


@dataclass
class WarmStart:
    states: np.ndarray  # (..., N+1, n)
    inputs: np.ndarray  # (..., N, m)

    def shifted(self) -> "WarmStart":
        xs = np.concatenate([self.states[..., 1:, :], self.states[..., -1:, :]], axis=-2)
        us = np.concatenate([self.inputs[..., 1:, :], self.inputs[..., -1:, :]], axis=-2)
        return WarmStart(xs, us)


@dataclass
class SqpSolution:
    states: np.ndarray
    inputs: np.ndarray
    cost: np.ndarray | float
    kkt_residual: np.ndarray | float
    iterations: int
    kkt_history: list = field(default_factory=list)
    failed: np.ndarray | bool = False


# ---------------------------------------------------------------------------
# internals: everything below works on batched arrays (S, ...)


def _node_theta(theta):
    return None if theta is None else theta[:, None]


class _Problem:
    def __init__(self, ocp: OcpSpec, t0: float, theta):
        self.ocp = ocp
        self.N = ocp.horizon_steps
        self.dt = ocp.dt
        self.theta = theta
        t = t0 + self.dt * np.arange(self.N + 1)
        self.ref = np.asarray(ocp.cost.reference(t), dtype=float)  # (N+1, n)
        c = ocp.cost
        self.ubounds = c.input_bounds
        self.soft = c.soft_state_bounds

    def clip(self, u):
        if self.ubounds is None:
            return u
        return np.clip(u, self.ubounds[0], self.ubounds[1])

    def _soft_terms(self, xs):
        if self.soft is None:
            return 0.0, 0.0, 0.0
        lo, hi, w = self.soft
        vh = np.maximum(xs - hi, 0.0)
        vl = np.maximum(lo - xs, 0.0)
        pen = np.sum(w * (vh**2 + vl**2), axis=-1)
        grad = 2.0 * w * (vh - vl)
        hdiag = 2.0 * w * ((vh > 0) | (vl > 0))
        return pen, grad, hdiag

    def cost(self, xs, us):
        c = self.ocp.cost
        ex = xs - self.ref
        run = 0.5 * np.einsum("...ki,ij,...kj->...k", ex[:, :-1], c.Q, ex[:, :-1])
        run = run + 0.5 * np.einsum("...ki,ij,...kj->...k", us, c.R, us)
        term = 0.5 * np.einsum("...i,ij,...j->...", ex[:, -1], c.Qf, ex[:, -1])
        pen, _, _ = self._soft_terms(xs)
        total = self.dt * run.sum(axis=-1) + term
        if self.soft is not None:
            total = total + self.dt * pen.sum(axis=-1)
        return total

    def quadratic(self, xs, us):
        """Cost gradients and Gauss-Newton Hessians at every node."""
        c = self.ocp.cost
        ex = xs - self.ref
        n = xs.shape[-1]
        gx = ex @ c.Q.T * self.dt
        gx[:, -1] = ex[:, -1] @ c.Qf.T
        Hxx = np.broadcast_to(c.Q * self.dt, xs.shape[:-1] + (n, n)).copy()
        Hxx[:, -1] = c.Qf
        if self.soft is not None:
            _, g, hd = self._soft_terms(xs)
            gx = gx + self.dt * g
            idx = np.arange(n)
            Hxx[..., idx, idx] += self.dt * hd
        gu = us @ c.R.T * self.dt
        Huu = c.R * self.dt
        return gx, Hxx, gu, Huu

    def rollout(self, x0, xs_ref, us_ref, K, kff, alpha):
        S = x0.shape[0]
        xs = np.empty((S, self.N + 1, x0.shape[-1]))
        us = np.empty(us_ref.shape)
        xs[:, 0] = x0
        dyn = self.ocp.dynamics
        a = alpha[:, None]
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(self.N):
                du = np.einsum("sij,sj->si", K[:, k], xs[:, k] - xs_ref[:, k])
                u = self.clip(us_ref[:, k] + a * kff[:, k] + du)
                us[:, k] = u
                xs[:, k + 1] = dyn.step(xs[:, k], u, self.dt, self.theta)
        return xs, us

    def open_loop(self, x0, us):
        S = x0.shape[0]
        xs = np.empty((S, self.N + 1, x0.shape[-1]))
        xs[:, 0] = x0
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(self.N):
                xs[:, k + 1] = self.ocp.dynamics.step(xs[:, k], us[:, k], self.dt, self.theta)
        return xs

    def linearize(self, xs, us):
        fx, A, B = self.ocp.dynamics.step_jacobians(xs[:, :-1], us, self.dt, _node_theta(self.theta))
        return fx - xs[:, 1:], A, B

    def kkt(self, x0, xs, us, defects, A, B, gx, gu):
        lam = gx[:, -1]
        grad_u = np.empty_like(us)
        for k in range(self.N - 1, -1, -1):
            grad_u[:, k] = gu[:, k] + np.einsum("sji,sj->si", B[:, k], lam)
            lam = gx[:, k] + np.einsum("sji,sj->si", A[:, k], lam)
        if self.ubounds is not None:
            lo, hi = self.ubounds
            at_hi = (us >= hi - 1e-10) & (grad_u < 0)
            at_lo = (us <= lo + 1e-10) & (grad_u > 0)
            grad_u = np.where(at_hi | at_lo, 0.0, grad_u)
        r = np.maximum(np.abs(grad_u).max(axis=(1, 2)), np.abs(defects).max(axis=(1, 2)))
        return np.maximum(r, np.abs(x0 - xs[:, 0]).max(axis=-1))

    def riccati(self, defects, A, B, gx, Hxx, gu, Huu):
        S, N, n, m = B.shape[0], self.N, B.shape[2], B.shape[3]
        K = np.empty((S, N, m, n))
        kff = np.empty((S, N, m))
        P = Hxx[:, -1].copy()
        p = gx[:, -1].copy()
        for k in range(N - 1, -1, -1):
            Ak, Bk = A[:, k], B[:, k]
            At, Bt = np.swapaxes(Ak, 1, 2), np.swapaxes(Bk, 1, 2)
            PA = P @ Ak
            PB = P @ Bk
            Qxx = Hxx[:, k] + At @ PA
            Quu = Huu + Bt @ PB
            Qux = Bt @ PA
            pd = p + np.einsum("sij,sj->si", P, defects[:, k])
            qx = gx[:, k] + np.einsum("sji,sj->si", Ak, pd)
            qu = gu[:, k] + np.einsum("sji,sj->si", Bk, pd)
            sol = np.linalg.solve(Quu, np.concatenate([Qux, qu[..., None]], axis=-1))
            K[:, k] = -sol[..., :n]
            kff[:, k] = -sol[..., n]
            P = Qxx + np.swapaxes(Qux, 1, 2) @ K[:, k]
            P = 0.5 * (P + np.swapaxes(P, 1, 2))
            p = qx + np.einsum("sji,sj->si", Qux, kff[:, k])
        return K, kff

    def iterate(self, x0, xs, us, active, max_backtracks=12):
        """One Gauss-Newton SQP iteration for the elements flagged ``active``."""
        defects, A, B = self.linearize(xs, us)
        gx, Hxx, gu, Huu = self.quadratic(xs, us)
        kkt = self.kkt(x0, xs, us, defects, A, B, gx, gu)
        K, kff = self.riccati(defects, A, B, gx, Hxx, gu, Huu)
        S = x0.shape[0]
        feasible = (np.abs(defects).max(axis=(1, 2)) <= 1e-12) & (np.abs(x0 - xs[:, 0]).max(-1) == 0)
        if np.all(feasible):
            xs0, us0, J0 = xs, us, self.cost(xs, us)
        else:
            xs0, us0 = self.rollout(x0, xs, us, K, kff, np.zeros(S))
            J0 = self.cost(xs0, us0)
            J_cur = self.cost(xs, us)
            xs0 = np.where(feasible[:, None, None], xs, xs0)
            us0 = np.where(feasible[:, None, None], us, us0)
            J0 = np.where(feasible, J_cur, J0)
        new_xs, new_us, new_J = xs0.copy(), us0.copy(), J0.copy()
        alpha_used = np.zeros(S)
        pending = active.copy()
        alpha = 1.0
        for _ in range(max_backtracks):
            if not pending.any():
                break
            cx, cu = self.rollout(x0, xs, us, K, kff, np.full(S, alpha))
            with np.errstate(over="ignore", invalid="ignore"):
                J = self.cost(cx, cu)
            tol = 1e-12 * np.maximum(1.0, np.abs(J0))
            ok = pending & np.isfinite(J) & np.all(np.isfinite(cx), axis=(1, 2)) & (
                (J <= J0 + tol) | ~np.isfinite(J0))
            new_xs[ok], new_us[ok], new_J[ok] = cx[ok], cu[ok], J[ok]
            alpha_used[ok] = alpha
            pending &= ~ok
            alpha *= 0.5
        keep = ~active
        new_xs[keep], new_us[keep] = xs[keep], us[keep]
        new_J[keep] = self.cost(xs[keep], us[keep]) if keep.any() else new_J[keep]
        failed = ~np.isfinite(new_J) | ~np.all(np.isfinite(new_xs), axis=(1, 2))
        return new_xs, new_us, new_J, kkt, np.abs(defects).max(axis=(1, 2)), alpha_used, failed


def _batched(ocp, x0, init, theta):
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    X0 = x0[None] if single else x0
    S = X0.shape[0]
    if theta is None:
        theta = ocp.params
    if theta is not None:
        theta = np.asarray(theta, dtype=float)
        if single or theta.ndim == 2:
            theta = np.broadcast_to(theta, (S,) + theta.shape[-2:])
    if init is not None:
        xs = np.asarray(init.states, dtype=float)
        us = np.asarray(init.inputs, dtype=float)
        if single:
            xs, us = xs[None], us[None]
        N = ocp.horizon_steps
        if xs.shape[1:] != (N + 1, ocp.state_dim) or us.shape[1:] != (N, ocp.input_dim):
            raise InvalidArgumentError("warm start dimensions do not match the OCP")
        xs, us = xs.copy(), us.copy()
    else:
        xs = us = None
    return single, X0, xs, us, theta


def sqp_solve(ocp: OcpSpec, x0, init: WarmStart | None = None, max_iters: int = 30, tol: float = 1e-6,
              theta=None, t0: float = 0.0, raise_on_failure: bool = True) -> SqpSolution:
    """Gauss-Newton SQP to convergence (KKT residual below ``tol``) or ``max_iters``.

    Without ``init`` the inputs start at zero and the states at their
    open-loop rollout.
    """
    if max_iters < 1:
        raise InvalidArgumentError("max_iters must be >= 1")
    single, X0, xs, us, th = _batched(ocp, x0, init, theta)
    prob = _Problem(ocp, t0, th)
    S = X0.shape[0]
    if us is None:
        us = np.zeros((S, ocp.horizon_steps, ocp.input_dim))
        xs = prob.open_loop(X0, us)
    active = np.ones(S, dtype=bool)
    failed = np.zeros(S, dtype=bool)
    history = []
    iters = 0
    kkt = np.full(S, np.inf)
    for it in range(max_iters + 1):
        defects, A, B = prob.linearize(xs, us)
        gx, Hxx, gu, Huu = prob.quadratic(xs, us)
        kkt = prob.kkt(X0, xs, us, defects, A, B, gx, gu)
        history.append(kkt.copy())
        failed |= ~np.isfinite(kkt)
        active = (kkt >= tol) & ~failed
        if not active.any() or it == max_iters:
            break
        xs, us, _, _, _, _, fail = prob.iterate(X0, xs, us, active)
        failed |= fail
        iters += 1
    cost = prob.cost(xs, us)
    if failed.any() and raise_on_failure:
        raise SolverFailure("SQP iterate became non-finite", last_iterate=(xs, us))
    if single:
        return SqpSolution(xs[0], us[0], float(cost[0]), float(kkt[0]), iters,
                           [float(h[0]) for h in history], bool(failed[0]))
    return SqpSolution(xs, us, cost, kkt, iters, history, failed)


def rti_step(ocp: OcpSpec, x0, warm: WarmStart, theta=None, t0: float = 0.0):
    """Exactly one Gauss-Newton iteration from ``warm``.

    Returns ``(u0, next_warm, diagnostics)`` where ``next_warm`` is the
    updated trajectory shifted by one node, ready for the next period, and
    ``diagnostics`` holds the unshifted updated trajectory, the KKT residual
    and gap size at the linearisation point, the accepted step length and
    the cost.
    """
    single, X0, xs, us, th = _batched(ocp, x0, warm, theta)
    prob = _Problem(ocp, t0, th)
    S = X0.shape[0]
    xs, us, J, kkt, gap, alpha, failed = prob.iterate(X0, xs, us, np.ones(S, dtype=bool))
    if single:
        if failed[0]:
            raise SolverFailure("RTI step became non-finite", last_iterate=(xs[0], us[0]))
        updated = WarmStart(xs[0], us[0])
        diag = {"states": xs[0], "inputs": us[0], "kkt_residual": float(kkt[0]),
                "defect": float(gap[0]), "alpha": float(alpha[0]), "cost": float(J[0]),
                "iterations": 1}
        return us[0, 0].copy(), updated.shifted(), diag
    updated = WarmStart(xs, us)
    diag = {"states": xs, "inputs": us, "kkt_residual": kkt, "defect": gap, "alpha": alpha,
            "cost": J, "failed": failed, "iterations": 1}
    return us[:, 0].copy(), updated.shifted(), diag


def dynamics_defects(ocp: OcpSpec, states, inputs, theta=None) -> np.ndarray:
    """``x_{k+1} - step(x_k, u_k)`` along a trajectory."""
    theta = ocp.params if theta is None else theta
    xs = np.asarray(states, float)
    us = np.asarray(inputs, float)
    th = None if theta is None else np.asarray(theta, float)
    if th is not None and xs.ndim == 3:
        th = th[:, None]
    return xs[..., 1:, :] - ocp.dynamics.step(xs[..., :-1, :], us, ocp.dt, th)
