"""Online adaptation of the task-specific weights.

The weights follow a random walk ``K_{k+1} = K_k + v_k`` and are observed
through ``y_k = phi_k . K_k + w_k``. In this module ``sigma_Q`` and
``sigma_R`` are *variances* (per weight element, and of the scalar
measurement). Every step function accepts arrays with extra leading batch
axes, so one call can advance independent filters in lockstep.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .errors import InvalidArgumentError, NumericError
from .features import PriorSpec

SIGMA_R_BOUNDS = (1e-4, 1e2)


class NoiseEstimateWarning(UserWarning):
    """The marginal-likelihood noise estimate hit its lower bound."""


@dataclass(frozen=True)
class KalmanAdapterState:
    mean: np.ndarray
    cov: np.ndarray
    sigma_Q: float
    sigma_R: float | np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def init_adapter(prior: PriorSpec, sigma_Q: float, sigma_R: float, feature_dim: int | None = None
                 ) -> KalmanAdapterState:
    """Start the filter at the prior: zero mean, covariance diag(lambdas)."""
    if feature_dim is not None and feature_dim != prior.dim:
        raise InvalidArgumentError(f"prior has {prior.dim} entries but the features have {feature_dim}")
    if not np.all(np.asarray(sigma_R) > 0):
        raise InvalidArgumentError("sigma_R must be positive")
    if sigma_Q < 0:
        raise InvalidArgumentError("sigma_Q must be non-negative")
    return KalmanAdapterState(np.zeros(prior.dim), np.diag(prior.lambdas), float(sigma_Q), sigma_R)


def batch_adapter(state: KalmanAdapterState, n: int) -> KalmanAdapterState:
    """Replicate one adapter state ``n`` times along a new leading axis."""
    return replace(state,
                   mean=np.broadcast_to(state.mean, (n,) + state.mean.shape).copy(),
                   cov=np.broadcast_to(state.cov, (n,) + state.cov.shape).copy(),
                   sigma_R=np.broadcast_to(np.asarray(state.sigma_R, dtype=float), (n,)).copy())


def kalman_step(state: KalmanAdapterState, phi, y) -> KalmanAdapterState:
    """Random-walk predict followed by a Joseph-form measurement update."""
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(y, dtype=float)
    if phi.shape[-1] != state.dim:
        raise InvalidArgumentError(f"feature vector has dim {phi.shape[-1]}, adapter has {state.dim}")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("measurement must be finite")
    F = state.dim
    R = np.asarray(state.sigma_R, dtype=float)
    P = state.cov + state.sigma_Q * np.eye(F)
    Pphi = np.einsum("...ij,...j->...i", P, phi)
    s = np.einsum("...i,...i->...", phi, Pphi) + R
    if np.any(~(s > 0)):
        raise NumericError("innovation variance is not positive")
    g = Pphi / s[..., None]
    innov = y - np.einsum("...i,...i->...", phi, state.mean)
    mean = state.mean + g * innov[..., None]
    I_gh = np.eye(F) - g[..., :, None] * phi[..., None, :]
    cov = I_gh @ P @ np.swapaxes(I_gh, -1, -2) + R[..., None, None] * g[..., :, None] * g[..., None, :]
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return replace(state, mean=mean, cov=cov)


def _marginal_nll_terms(Phi, y, prior: PriorSpec):
    Phi = np.asarray(Phi, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    U, sv, _ = np.linalg.svd(Phi * np.sqrt(prior.lambdas), full_matrices=False)
    ev = sv**2
    c = U.T @ y
    rest = max(float(y @ y - c @ c), 0.0)
    n_null = y.shape[0] - ev.shape[0]

    def nll(log_r):
        r = math.exp(log_r)
        return 0.5 * (np.sum(np.log(ev + r)) + n_null * log_r + np.sum(c**2 / (ev + r)) + rest / r)

    return nll


def estimate_measurement_noise(batch, prior: PriorSpec, n_grid: int = 121) -> float:
    """Maximum-marginal-likelihood measurement-noise variance for a batch.

    ``batch`` is a sequence of ``(phi, y)`` pairs or a tuple ``(Phi, y)`` of
    arrays. The weights are integrated out under the prior; the 1-d search
    over ``log sigma_R`` is a grid followed by a bounded Brent refinement.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[0]) == 2:
        Phi, y = np.asarray(batch[0], dtype=float), np.asarray(batch[1], dtype=float)
    else:
        Phi = np.array([np.asarray(p, dtype=float) for p, _ in batch])
        y = np.array([float(v) for _, v in batch])
    if Phi.shape[0] < 5:
        raise InvalidArgumentError("noise estimation needs a batch of at least 5 samples")
    if Phi.shape[1] != prior.dim:
        raise InvalidArgumentError("feature dimension does not match the prior")
    lo, hi = (math.log(b) for b in SIGMA_R_BOUNDS)
    if np.ptp(Phi, axis=0).max() == 0 and np.ptp(y) == 0:
        warnings.warn("degenerate batch: identical samples, returning the lower bound",
                      NoiseEstimateWarning, stacklevel=2)
        return SIGMA_R_BOUNDS[0]
    nll = _marginal_nll_terms(Phi, y, prior)
    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([nll(g) for g in grid])
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = optimize.minimize_scalar(nll, bounds=(a, b), method="bounded", options={"xatol": 1e-8})
    best = res.x if res.fun <= vals[i] else grid[i]
    if best <= lo + 1e-6:
        warnings.warn("measurement-noise estimate is at the lower bound", NoiseEstimateWarning,
                      stacklevel=2)
        return SIGMA_R_BOUNDS[0]
    return float(math.exp(best))


# ---------------------------------------------------------------------------
# Constant-acceleration estimator for position/velocity measurements


@dataclass(frozen=True)
class AccelEstimatorState:
    state: np.ndarray  # (..., 3): position, velocity, acceleration
    cov: np.ndarray  # (..., 3, 3)
    q_jerk: float
    r_meas: np.ndarray  # (2, 2)


def init_accel_estimator(q_jerk: float, r_meas, position: float = 0.0, cov_scale: float = 1.0
                         ) -> AccelEstimatorState:
    r = np.asarray(r_meas, dtype=float)
    if r.ndim == 1:
        r = np.diag(r)
    return AccelEstimatorState(np.array([position, 0.0, 0.0]), cov_scale * np.eye(3),
                               float(q_jerk), r)


def _ca_matrices(dt: float, q: float):
    Fm = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    Q = q * np.array([
        [dt**5 / 20, dt**4 / 8, dt**3 / 6],
        [dt**4 / 8, dt**3 / 3, dt**2 / 2],
        [dt**3 / 6, dt**2 / 2, dt],
    ])
    return Fm, Q


def accel_estimator_step(est: AccelEstimatorState, meas, dt: float) -> AccelEstimatorState:
    """Predict with white-jerk constant-acceleration motion, update on (position, velocity)."""
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    Fm, Q = _ca_matrices(dt, est.q_jerk)
    x = est.state @ Fm.T
    P = Fm @ est.cov @ Fm.T + Q
    S = P[..., :2, :2] + est.r_meas
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError("innovation covariance is not positive definite") from exc
    G = np.swapaxes(np.linalg.solve(S, P[..., :2, :]), -1, -2)  # (..., 3, 2)
    innov = np.asarray(meas, dtype=float) - x[..., :2]
    x = x + np.einsum("...ij,...j->...i", G, innov)
    H = np.zeros((2, 3))
    H[0, 0] = H[1, 1] = 1.0
    I_GH = np.eye(3) - G @ H
    P = I_GH @ P @ np.swapaxes(I_GH, -1, -2) + G @ est.r_meas @ np.swapaxes(G, -1, -2)
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    return replace(est, state=x, cov=P)
