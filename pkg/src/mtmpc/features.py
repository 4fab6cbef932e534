"""Feature maps and conjugate Bayesian linear regression.

The error model for one channel is ``e(z) = phi(z) @ K`` with a Gaussian
prior ``K ~ N(0, diag(lambdas))`` and Gaussian measurement noise.
Noise levels named ``sigma_w`` are standard deviations throughout this
module; the noise variance is ``sigma_w**2``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import InvalidArgumentError, NumericError


class FeatureKind(str, enum.Enum):
    TRIG = "Trig"
    CONSTANT = "Constant"
    MLP = "Mlp"


@dataclass(frozen=True)
class TrigFeatureMap:
    """Sines then cosines of ``2*pi*omega_l . z`` for each frequency row."""

    frequencies: np.ndarray  # (E, d)

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        if f.shape[0] < 1 or not np.all(np.isfinite(f)):
            raise InvalidArgumentError("frequencies must be a finite (E, d) matrix with E >= 1")
        object.__setattr__(self, "frequencies", f)

    @property
    def n_frequencies(self) -> int:
        return self.frequencies.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def output_dim(self) -> int:
        return 2 * self.n_frequencies


@dataclass(frozen=True)
class MlpWeights:
    """``d -> h -> h -> L`` network with tanh hidden layers and linear output."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"MLP weight {name} has non-finite entries")
            object.__setattr__(self, name, arr)
        h, d = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape != (h, h) or self.b2.shape != (h,):
            raise InvalidArgumentError("inconsistent hidden-layer shapes")
        if self.W3.shape[1] != h or self.b3.shape != (self.W3.shape[0],):
            raise InvalidArgumentError("inconsistent output-layer shapes")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W3.shape[0]

    def as_list(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    @classmethod
    def init(cls, d: int, h: int, L: int, rng: np.random.Generator) -> "MlpWeights":
        return cls(
            W1=rng.standard_normal((h, d)) / np.sqrt(d),
            b1=0.1 * rng.standard_normal(h),
            W2=rng.standard_normal((h, h)) / np.sqrt(h),
            b2=0.1 * rng.standard_normal(h),
            W3=rng.standard_normal((L, h)) / np.sqrt(h),
            b3=0.1 * rng.standard_normal(L),
        )


@dataclass(frozen=True)
class FeatureModel:
    kind: FeatureKind
    input_dim: int
    trig: TrigFeatureMap | None = None
    mlp: MlpWeights | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        if self.kind is FeatureKind.TRIG and (self.trig is None or self.trig.input_dim != self.input_dim):
            raise InvalidArgumentError("Trig feature model needs a TrigFeatureMap of matching input dim")
        if self.kind is FeatureKind.MLP and (self.mlp is None or self.mlp.input_dim != self.input_dim):
            raise InvalidArgumentError("Mlp feature model needs MlpWeights of matching input dim")

    @classmethod
    def from_frequencies(cls, frequencies) -> "FeatureModel":
        m = TrigFeatureMap(frequencies)
        return cls(FeatureKind.TRIG, m.input_dim, trig=m)

    @classmethod
    def constant(cls, input_dim: int = 1) -> "FeatureModel":
        return cls(FeatureKind.CONSTANT, int(input_dim))

    @classmethod
    def from_mlp(cls, weights: MlpWeights) -> "FeatureModel":
        return cls(FeatureKind.MLP, weights.input_dim, mlp=weights)

    @property
    def feature_dim(self) -> int:
        if self.kind is FeatureKind.TRIG:
            return self.trig.output_dim
        if self.kind is FeatureKind.MLP:
            return self.mlp.output_dim
        return 1

    def __call__(self, z) -> np.ndarray:
        return eval_features(self, z)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "input_dim": self.input_dim}
        if self.kind is FeatureKind.TRIG:
            out["frequencies"] = self.trig.frequencies.tolist()
        elif self.kind is FeatureKind.MLP:
            names = ("W1", "b1", "W2", "b2", "W3", "b3")
            out["mlp"] = {n: getattr(self.mlp, n).tolist() for n in names}
        return out

    @classmethod
    def from_dict(cls, d) -> "FeatureModel":
        kind = FeatureKind(d["kind"])
        if kind is FeatureKind.TRIG:
            return cls.from_frequencies(np.asarray(d["frequencies"], dtype=float))
        if kind is FeatureKind.MLP:
            return cls.from_mlp(MlpWeights(**{k: np.asarray(v, dtype=float) for k, v in d["mlp"].items()}))
        return cls.constant(int(d["input_dim"]))


def _check_z(model: FeatureModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z[None]
    if z.shape[-1] != model.input_dim:
        raise InvalidArgumentError(
            f"input location has dim {z.shape[-1]}, feature model expects {model.input_dim}"
        )
    return z


def _mlp_forward(w: MlpWeights, z: np.ndarray):
    h1 = np.tanh(z @ w.W1.T + w.b1)
    h2 = np.tanh(h1 @ w.W2.T + w.b2)
    return h1, h2, h2 @ w.W3.T + w.b3


def eval_features(model: FeatureModel, z) -> np.ndarray:
    """Feature vector(s) ``phi(z)``, shape ``(..., feature_dim)``."""
    z = _check_z(model, z)
    if model.kind is FeatureKind.TRIG:
        angle = 2 * np.pi * (z @ model.trig.frequencies.T)
        return np.concatenate([np.sin(angle), np.cos(angle)], axis=-1)
    if model.kind is FeatureKind.MLP:
        return _mlp_forward(model.mlp, z)[2]
    return np.ones(z.shape[:-1] + (1,))


def feature_jacobian(model: FeatureModel, z) -> np.ndarray:
    """``d phi / d z``, shape ``(..., feature_dim, d)``."""
    z = _check_z(model, z)
    if model.kind is FeatureKind.TRIG:
        Om = model.trig.frequencies
        angle = 2 * np.pi * (z @ Om.T)
        scale = 2 * np.pi * Om  # (E, d)
        top = np.cos(angle)[..., None] * scale
        bottom = -np.sin(angle)[..., None] * scale
        return np.concatenate([top, bottom], axis=-2)
    if model.kind is FeatureKind.MLP:
        w = model.mlp
        h1, h2, _ = _mlp_forward(w, z)
        d1 = (1 - h1**2)[..., None] * w.W1  # (..., h, d)
        d2 = (1 - h2**2)[..., None] * (w.W2 @ d1)
        return w.W3 @ d2
    return np.zeros(z.shape[:-1] + (1, model.input_dim))


@dataclass(frozen=True)
class PriorSpec:
    """Diagonal Gaussian prior variances over the linear weights."""

    lambdas: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambdas, dtype=float))
        if lam.ndim != 1 or not np.all(lam > 0) or not np.all(np.isfinite(lam)):
            raise InvalidArgumentError("prior lambdas must be a vector of finite positive reals")
        object.__setattr__(self, "lambdas", lam)

    @property
    def dim(self) -> int:
        return self.lambdas.shape[0]

    def as_posterior(self) -> "Posterior":
        return Posterior(np.zeros(self.dim), np.diag(self.lambdas))


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise InvalidArgumentError("posterior covariance shape does not match its mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Posterior":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["covariance"], dtype=float))


def _cholesky_or_raise(A: np.ndarray, what: str):
    try:
        return linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        try:
            cond = np.linalg.cond(A)
        except np.linalg.LinAlgError:
            cond = np.inf
        raise NumericError(f"{what} is not positive definite (condition number {cond:.3e})") from exc


def posterior_update(prior: PriorSpec, Phi, y, sigma_w: float) -> Posterior:
    """Posterior over the weights given ``N`` rows of features and targets.

    Solves with a Cholesky factor of the precision
    ``diag(1/lambdas) + Phi.T @ Phi / sigma_w**2``.
    """
    Phi = np.asarray(Phi, dtype=float).reshape(-1, prior.dim)
    y = np.asarray(y, dtype=float).reshape(-1)
    if Phi.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"{Phi.shape[0]} feature rows but {y.shape[0]} targets")
    if not sigma_w > 0:
        raise InvalidArgumentError("sigma_w must be positive")
    s2 = float(sigma_w) ** 2
    precision = np.diag(1.0 / prior.lambdas) + Phi.T @ Phi / s2
    cf = _cholesky_or_raise(precision, "posterior precision")
    cov = linalg.cho_solve(cf, np.eye(prior.dim))
    cov = 0.5 * (cov + cov.T)
    mean = linalg.cho_solve(cf, Phi.T @ y / s2)
    return Posterior(mean, cov)


def predict(post: Posterior, model: FeatureModel, z, sigma_w: float):
    """Gaussian predictive ``(mean, variance)`` at ``z`` (vectorised over leading axes)."""
    phi = eval_features(model, z)
    if phi.shape[-1] != post.mean.shape[0]:
        raise InvalidArgumentError("posterior dimension does not match the feature model")
    mean = phi @ post.mean
    var = float(sigma_w) ** 2 + np.einsum("...i,ij,...j->...", phi, post.covariance, phi)
    if np.any(~(var > 0)):
        raise NumericError("predictive variance is not positive")
    return mean, var
