"""Reduced simulated plants, disturbance task families and RK4 integration.

Two systems are modelled, both with a single error channel acting on the
acceleration row:

* ``VerticalLoad``: a point mass moved along the world z axis,
  state ``(z, zdot)``, input a vertical force.
* ``HingedDoor``: a door rotating about its hinge, state ``(alpha, alphadot)``
  in radians, input a hinge torque. The nominal door has zero stiffness and
  damping.

All flow functions are vectorised: states have shape ``(..., n)`` and inputs
``(..., m)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, NumericOverflowError


class PlantKind(str, enum.Enum):
    VERTICAL_LOAD = "VerticalLoad"
    HINGED_DOOR = "HingedDoor"


class TaskFamily(str, enum.Enum):
    CONSTANT = "Constant"
    SINUSOID = "Sinusoid"
    SIN_PLUS_EXP = "SinPlusExp"
    DOOR_FRICTION = "DoorFriction"


@dataclass(frozen=True)
class PlantSpec:
    """Static description of a reduced plant.

    ``error_input_indices`` index the concatenated vector ``(x, u)`` and
    select the input location ``z`` the error model reads.
    ``state_box`` is the ``(lo, hi)`` box outside which a simulation is
    declared saturated.
    """

    kind: PlantKind
    state_dim: int
    input_dim: int
    error_indices: tuple[int, ...]
    error_input_indices: tuple[int, ...]
    mass_or_inertia: float
    gravity: float = 0.0
    state_box: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self):
        if not self.error_indices:
            raise InvalidArgumentError("a plant needs at least one error channel")
        if any(i < 0 or i >= self.state_dim for i in self.error_indices):
            raise InvalidArgumentError(
                f"error_indices {self.error_indices} outside 0..{self.state_dim - 1}"
            )
        nz = self.state_dim + self.input_dim
        if not self.error_input_indices or any(
            i < 0 or i >= nz for i in self.error_input_indices
        ):
            raise InvalidArgumentError(
                f"error_input_indices {self.error_input_indices} outside 0..{nz - 1}"
            )
        if not self.mass_or_inertia > 0:
            raise InvalidArgumentError("mass_or_inertia must be positive")

    @property
    def n_errors(self) -> int:
        return len(self.error_indices)

    @property
    def location_dim(self) -> int:
        return len(self.error_input_indices)

    def error_matrix(self) -> np.ndarray:
        """The selector B_e of shape (state_dim, n_errors)."""
        B_e = np.zeros((self.state_dim, self.n_errors))
        for col, row in enumerate(self.error_indices):
            B_e[row, col] = 1.0
        return B_e

    def location_selector(self) -> np.ndarray:
        """Matrix S with z = S @ concat(x, u)."""
        S = np.zeros((self.location_dim, self.state_dim + self.input_dim))
        for row, col in enumerate(self.error_input_indices):
            S[row, col] = 1.0
        return S

    def hover_input(self) -> np.ndarray:
        """Input that holds the nominal plant at rest."""
        if self.kind is PlantKind.VERTICAL_LOAD:
            return np.array([self.mass_or_inertia * self.gravity])
        return np.zeros(self.input_dim)


def vertical_load(
    mass: float = 1.0,
    gravity: float = 9.81,
    error_input_indices: Sequence[int] = (0,),
    state_box=((-5.0, -20.0), (5.0, 20.0)),
) -> PlantSpec:
    return PlantSpec(
        kind=PlantKind.VERTICAL_LOAD,
        state_dim=2,
        input_dim=1,
        error_indices=(1,),
        error_input_indices=tuple(int(i) for i in error_input_indices),
        mass_or_inertia=float(mass),
        gravity=float(gravity),
        state_box=tuple(tuple(float(v) for v in b) for b in state_box) if state_box else None,
    )


def hinged_door(
    inertia: float = 2.0,
    error_input_indices: Sequence[int] = (0, 1),
    state_box=((-math.pi, -20.0), (math.pi, 20.0)),
) -> PlantSpec:
    return PlantSpec(
        kind=PlantKind.HINGED_DOOR,
        state_dim=2,
        input_dim=1,
        error_indices=(1,),
        error_input_indices=tuple(int(i) for i in error_input_indices),
        mass_or_inertia=float(inertia),
        gravity=0.0,
        state_box=tuple(tuple(float(v) for v in b) for b in state_box) if state_box else None,
    )


def make_plant(kind: str | PlantKind, **kwargs) -> PlantSpec:
    kind = PlantKind(kind)
    if kind is PlantKind.VERTICAL_LOAD:
        return vertical_load(**kwargs)
    return hinged_door(**kwargs)


@dataclass(frozen=True)
class DisturbanceTask:
    """One operating condition. ``params`` depends on ``family``:

    * Constant: ``c``
    * Sinusoid: ``amplitude``, ``omega``
    * SinPlusExp: ``a``, ``b``, ``omega``, ``k`` (2-vector)
    * DoorFriction: ``c_v``, ``k_s``, ``mu_f``, ``eps``, ``inertia``
    """

    task_id: str
    family: TaskFamily
    params: Mapping[str, object] = field(default_factory=dict)
    test_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", TaskFamily(self.family))
        if self.family is TaskFamily.DOOR_FRICTION:
            p = self.params
            for key in ("c_v", "k_s", "mu_f"):
                if float(p.get(key, 0.0)) < 0:
                    raise InvalidArgumentError(f"DoorFriction {key} must be >= 0")
            if not float(p.get("eps", 0.05)) > 0:
                raise InvalidArgumentError("DoorFriction eps must be > 0")
            if not float(p.get("inertia", 1.0)) > 0:
                raise InvalidArgumentError("DoorFriction inertia must be > 0")

    def to_dict(self) -> dict:
        params = {k: (list(v) if isinstance(v, (tuple, list, np.ndarray)) else v)
                  for k, v in self.params.items()}
        return {"task_id": self.task_id, "family": self.family.value,
                "params": params, "test_only": self.test_only}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DisturbanceTask":
        return cls(str(d["task_id"]), TaskFamily(d["family"]), dict(d.get("params", {})),
                   bool(d.get("test_only", False)))


_LOCATION_DIM = {
    TaskFamily.SINUSOID: 1,
    TaskFamily.SIN_PLUS_EXP: 2,
    TaskFamily.DOOR_FRICTION: 2,
}


def _check_location(task: DisturbanceTask, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z[None]
    want = _LOCATION_DIM.get(task.family)
    if want is not None and z.shape[-1] != want:
        raise InvalidArgumentError(
            f"{task.family.value} residual expects a {want}-d input location, got {z.shape[-1]}"
        )
    return z


def residual(task: DisturbanceTask, z) -> np.ndarray:
    """Ground-truth error e(z), shape ``(..., 1)``."""
    z = _check_location(task, z)
    p = task.params
    fam = task.family
    if fam is TaskFamily.CONSTANT:
        e = np.full(z.shape[:-1], float(p["c"]))
    elif fam is TaskFamily.SINUSOID:
        e = float(p["amplitude"]) * np.sin(2 * np.pi * float(p["omega"]) * z[..., 0])
    elif fam is TaskFamily.SIN_PLUS_EXP:
        k = np.asarray(p.get("k", (1.0, 1.0)), dtype=float)
        # far outside the state box exp overflows to inf; callers check finiteness
        with np.errstate(over="ignore"):
            e = float(p["a"]) * np.sin(-2 * np.pi * float(p["omega"]) * z[..., 0]) + float(
                p["b"]
            ) * np.exp(z @ k)
    else:
        alpha, alphadot = z[..., 0], z[..., 1]
        torque = (
            float(p.get("c_v", 0.0)) * alphadot
            + float(p.get("k_s", 0.0)) * alpha
            + float(p.get("mu_f", 0.0)) * np.tanh(alphadot / float(p.get("eps", 0.05)))
        )
        e = -torque / float(p.get("inertia", 1.0))
    return e[..., None]


def residual_jacobian(task: DisturbanceTask, z) -> np.ndarray:
    """Derivative de/dz, shape ``(..., 1, d)``."""
    z = _check_location(task, z)
    p = task.params
    fam = task.family
    J = np.zeros(z.shape[:-1] + (1, z.shape[-1]))
    if fam is TaskFamily.SINUSOID:
        w = float(p["omega"])
        J[..., 0, 0] = float(p["amplitude"]) * 2 * np.pi * w * np.cos(2 * np.pi * w * z[..., 0])
    elif fam is TaskFamily.SIN_PLUS_EXP:
        k = np.asarray(p.get("k", (1.0, 1.0)), dtype=float)
        w = float(p["omega"])
        ex = float(p["b"]) * np.exp(z @ k)
        J[..., 0, :] = ex[..., None] * k
        J[..., 0, 0] += -2 * np.pi * w * float(p["a"]) * np.cos(-2 * np.pi * w * z[..., 0])
    elif fam is TaskFamily.DOOR_FRICTION:
        inertia = float(p.get("inertia", 1.0))
        eps = float(p.get("eps", 0.05))
        sech2 = 1.0 / np.cosh(z[..., 1] / eps) ** 2
        J[..., 0, 0] = -float(p.get("k_s", 0.0)) / inertia
        J[..., 0, 1] = -(float(p.get("c_v", 0.0)) + float(p.get("mu_f", 0.0)) * sech2 / eps) / inertia
    return J


def _check_xu(plant: PlantSpec, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1:] != (plant.state_dim,) or u.shape[-1:] != (plant.input_dim,):
        raise InvalidArgumentError(
            f"{plant.kind.value} expects state dim {plant.state_dim} and input dim "
            f"{plant.input_dim}, got {x.shape} and {u.shape}"
        )
    return x, u


def nominal_flow(plant: PlantSpec, x, u) -> np.ndarray:
    x, u = _check_xu(plant, x, u)
    accel = u[..., 0] / plant.mass_or_inertia
    if plant.kind is PlantKind.VERTICAL_LOAD:
        accel = accel - plant.gravity
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    out = np.empty(shape + (2,))
    out[..., 0] = x[..., 1]
    out[..., 1] = accel
    return out


def nominal_jacobians(plant: PlantSpec, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time Jacobians (df/dx, df/du) of the nominal flow."""
    x, u = _check_xu(plant, x, u)
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    A = np.zeros(shape + (2, 2))
    B = np.zeros(shape + (2, 1))
    A[..., 0, 1] = 1.0
    B[..., 1, 0] = 1.0 / plant.mass_or_inertia
    return A, B


def input_location(plant: PlantSpec, x, u) -> np.ndarray:
    x, u = _check_xu(plant, x, u)
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    xu = np.concatenate(
        [np.broadcast_to(x, shape + x.shape[-1:]), np.broadcast_to(u, shape + u.shape[-1:])],
        axis=-1,
    )
    return xu[..., list(plant.error_input_indices)]


_COMPATIBLE = {
    TaskFamily.CONSTANT: {PlantKind.VERTICAL_LOAD, PlantKind.HINGED_DOOR},
    TaskFamily.SINUSOID: {PlantKind.VERTICAL_LOAD},
    TaskFamily.SIN_PLUS_EXP: {PlantKind.VERTICAL_LOAD},
    TaskFamily.DOOR_FRICTION: {PlantKind.HINGED_DOOR},
}


def check_compatible(plant: PlantSpec, task: DisturbanceTask) -> None:
    if plant.kind not in _COMPATIBLE[task.family]:
        raise InvalidArgumentError(
            f"task family {task.family.value} cannot drive a {plant.kind.value} plant"
        )


def true_flow(plant: PlantSpec, task: DisturbanceTask, x, u) -> np.ndarray:
    """Nominal flow plus the task's residual scattered into the error rows."""
    check_compatible(plant, task)
    f = nominal_flow(plant, x, u)
    e = residual(task, input_location(plant, x, u))
    f[..., list(plant.error_indices)] += e
    return f


def step_rk4(flow: Callable, x, u, dt: float, t: float | None = None) -> np.ndarray:
    """One classical RK4 step with ``u`` held over the interval."""
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = flow(x, u)
    k2 = flow(x + 0.5 * dt * k1, u)
    k3 = flow(x + 0.5 * dt * k2, u)
    k4 = flow(x + dt * k3, u)
    x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        where = "" if t is None else f" at t={t:.4f}s"
        raise NumericOverflowError(
            f"RK4 step{where} produced a non-finite state from x={x.tolist()}, "
            f"u={np.asarray(u).tolist()}, dt={dt}"
        )
    return x_next


def clamp_to_box(plant: PlantSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Clamp states into ``plant.state_box``; also return the saturation mask."""
    x = np.asarray(x, dtype=float)
    if plant.state_box is None:
        return x, np.zeros(x.shape[:-1], dtype=bool)
    lo, hi = (np.asarray(b) for b in plant.state_box)
    bad = ~np.isfinite(x).all(axis=-1) | ((x < lo) | (x > hi)).any(axis=-1)
    return np.clip(np.nan_to_num(x, nan=0.0), lo, hi), bad


@dataclass(frozen=True)
class ReferenceSchedule:
    """Piecewise-constant position set-points, cycling through ``levels``.

    The desired state is ``(level, 0)``: position at the set-point, at rest.
    """

    levels: tuple[float, ...] = (0.0, 0.5)
    period: float = 2.0
    duration: float = 8.0
    dt: float = 0.02

    def __post_init__(self):
        if not self.levels:
            raise InvalidArgumentError("a reference schedule needs at least one level")
        if not (self.period > 0 and self.duration > 0 and self.dt > 0):
            raise InvalidArgumentError("period, duration and dt must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.floor(t / self.period + 1e-9).astype(int) % len(self.levels)
        return np.asarray(self.levels, dtype=float)[idx]

    def desired_state(self, t, state_dim: int = 2) -> np.ndarray:
        pos = self.position(t)
        out = np.zeros(pos.shape + (state_dim,))
        out[..., 0] = pos
        return out


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    true_residuals: np.ndarray
    saturated: bool = False


# Frozen study grids -------------------------------------------------------

SINEXP_TRAIN_PAIRS = (
    (-6.0, -6.0), (6.0, 2.0), (0.0, -2.0), (3.0, -6.0), (-3.0, 2.0),
    (-6.0, 2.0), (6.0, -2.0), (0.0, -6.0), (3.0, 2.0), (-3.0, -2.0),
    (-6.0, -2.0), (6.0, -6.0), (0.0, 2.0), (3.0, -2.0), (-3.0, -6.0),
)
SINEXP_TEST_PAIR = (6.0, -8.0)


def make_task_family(family_spec) -> list[DisturbanceTask]:
    """Build one of the built-in task studies.

    ``family_spec`` is a study name or a mapping with a ``name`` key plus
    optional overrides (door study: ``mu_f``, ``c_v``, ``inertia``, ``eps``,
    ``train``, ``human_stiffness``, ``stiffness_test``).
    """
    if isinstance(family_spec, str):
        family_spec = {"name": family_spec}
    name = family_spec.get("name")
    if name == "sinusoid_study":
        amp = float(family_spec.get("amplitude", 3.0))
        return [
            DisturbanceTask("task1", TaskFamily.CONSTANT, {"c": -1.6}),
            DisturbanceTask("task2", TaskFamily.SINUSOID, {"amplitude": amp, "omega": 2.0}),
            DisturbanceTask("task3", TaskFamily.SINUSOID, {"amplitude": amp, "omega": 6.0}),
            DisturbanceTask("task4", TaskFamily.SINUSOID, {"amplitude": amp, "omega": 4.0},
                            test_only=True),
        ]
    if name == "sinexp_study":
        tasks = [
            DisturbanceTask(f"train{i + 1:02d}", TaskFamily.SIN_PLUS_EXP,
                            {"a": a, "b": b, "omega": -3.0, "k": [1.0, 1.0]})
            for i, (a, b) in enumerate(SINEXP_TRAIN_PAIRS)
        ]
        a, b = SINEXP_TEST_PAIR
        tasks.append(DisturbanceTask("test", TaskFamily.SIN_PLUS_EXP,
                                     {"a": a, "b": b, "omega": -3.0, "k": [1.0, 1.0]},
                                     test_only=True))
        return tasks
    if name == "door_study":
        mu = [float(v) for v in family_spec.get("mu_f", (0.0, 0.4, 0.8, 1.2))]
        cv = [float(v) for v in family_spec.get("c_v", (0.1, 0.3))]
        inertia = float(family_spec.get("inertia", 2.0))
        eps = float(family_spec.get("eps", 0.05))
        train = set(int(i) for i in family_spec.get("train", range(len(mu))))
        tasks = [
            DisturbanceTask(f"door{i + 1}", TaskFamily.DOOR_FRICTION,
                            {"c_v": cv[i % len(cv)], "k_s": 0.0, "mu_f": m,
                             "eps": eps, "inertia": inertia},
                            test_only=i not in train)
            for i, m in enumerate(mu)
        ]
        k_h = float(family_spec.get("human_stiffness", 0.0))
        if k_h > 0:
            # a person pushing the door back: a soft spring on the lightest friction level
            tasks.append(DisturbanceTask(
                "door_human", TaskFamily.DOOR_FRICTION,
                {"c_v": cv[0], "k_s": k_h, "mu_f": mu[0], "eps": eps, "inertia": inertia}))
        k_s = float(family_spec.get("stiffness_test", 0.0))
        if k_s > 0:
            tasks.append(DisturbanceTask(
                "door_stiff", TaskFamily.DOOR_FRICTION,
                {"c_v": cv[0], "k_s": k_s, "mu_f": mu[len(mu) // 2],
                 "eps": eps, "inertia": inertia},
                test_only=True))
        return tasks
    raise ConfigurationError(
        f"unknown task family {name!r}; expected sinusoid_study, sinexp_study or door_study"
    )
