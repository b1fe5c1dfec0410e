"""Vehicle dynamics models: discrete steps, control clamping, rollouts.

Two models are provided, both integrated with explicit Euler at a fixed dt:

* ``dubins``: planar unicycle, state ``[x, y, theta]``, controls
  ``[v, omega]``.
* ``multirotor``: 13-state quadrotor, state
  ``[x, y, z, vx, vy, vz, qw, qx, qy, qz, p, q, r]``, controls
  ``[p_des, q_des, r_des, tau]``. Attitude is a unit quaternion
  (scalar first), body rates follow a first-order lag toward the
  commanded rates, and thrust tau acts along the body z axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidStateError

DUBINS = "dubins"
MULTIROTOR = "multirotor"

MODEL_KINDS = (DUBINS, MULTIROTOR)

STATE_DIM = {DUBINS: 3, MULTIROTOR: 13}
CONTROL_DIM = {DUBINS: 2, MULTIROTOR: 4}
# Leading state components that live in the workspace (obstacle checks).
POSITION_DIM = {DUBINS: 2, MULTIROTOR: 3}

STATE_NAMES = {
    DUBINS: ("x", "y", "theta"),
    MULTIROTOR: (
        "x", "y", "z", "vx", "vy", "vz",
        "qw", "qx", "qy", "qz", "p", "q", "r",
    ),
}
CONTROL_NAMES = {
    DUBINS: ("v", "omega"),
    MULTIROTOR: ("p_des", "q_des", "r_des", "tau"),
}

_QUAT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class ControlLimits:
    """Per-channel box limits on the controls."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidStateError("control limits must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidStateError("control limits must be finite")
        if np.any(lo > hi):
            raise InvalidStateError("control limit lo exceeds hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters shared by the dynamics steps.

    ``rate_lag`` are the body-rate lag time constants (kappa_p, kappa_q,
    kappa_r) of the multirotor; the Dubins model only uses ``dt``.
    ``vehicle_radius`` inflates obstacle margins when a constraint field is
    built for this vehicle; the steps themselves ignore it.
    """

    dt: float = 0.01
    mass: float = 1.0
    gravity: float = 9.81
    rate_lag: tuple[float, float, float] = (0.25, 0.25, 0.7)
    vehicle_radius: float = 0.0

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise InvalidStateError("dt must be positive and finite")
        if not (self.mass > 0 and np.isfinite(self.mass)):
            raise InvalidStateError("mass must be positive and finite")
        if any(k <= 0 for k in self.rate_lag):
            raise InvalidStateError("rate lag constants must be positive")
        if self.vehicle_radius < 0:
            raise InvalidStateError("vehicle radius must be nonnegative")

    def packed(self) -> np.ndarray:
        """Flat parameter vector consumed by the batch kernels."""
        return np.array(
            [self.dt, self.mass, self.gravity, *self.rate_lag], dtype=float
        )


def default_limits(kind: str) -> ControlLimits:
    """Stock actuator limits for each model."""
    if kind == DUBINS:
        return ControlLimits(lo=np.array([-0.1, -0.1]), hi=np.array([10.0, 10.0]))
    if kind == MULTIROTOR:
        return ControlLimits(
            lo=np.array([-10.0, -10.0, -10.0, 0.0]),
            hi=np.array([10.0, 10.0, 10.0, 45.0]),
        )
    raise InvalidStateError(f"unknown model kind: {kind!r}")


def clamp_controls(u: np.ndarray, limits: ControlLimits) -> np.ndarray:
    """Clip controls to the box limits (works on (m,) or (..., m))."""
    return np.clip(u, limits.lo, limits.hi)


def dubins_step_batch(states: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    """Euler step of the planar unicycle for a batch of states (B, 3)."""
    x, y, th = states[:, 0], states[:, 1], states[:, 2]
    v, om = controls[:, 0], controls[:, 1]
    out = np.empty_like(states)
    out[:, 0] = x + dt * v * np.cos(th)
    out[:, 1] = y + dt * v * np.sin(th)
    out[:, 2] = th + dt * om
    return out


def _quat_rotate_ez(quat: np.ndarray) -> np.ndarray:
    """Rotate the body z axis into the world frame: R(q) @ [0, 0, 1].

    ``quat`` is (B, 4) scalar-first; returns (B, 3).
    """
    qw, qx, qy, qz = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    out = np.empty((quat.shape[0], 3))
    out[:, 0] = 2.0 * (qx * qz + qw * qy)
    out[:, 1] = 2.0 * (qy * qz - qw * qx)
    out[:, 2] = 1.0 - 2.0 * (qx * qx + qy * qy)
    return out


def multirotor_step_batch(
    states: np.ndarray, controls: np.ndarray, params: ModelParams
) -> np.ndarray:
    """Euler step of the 13-state multirotor for a batch of states (B, 13).

    Velocity integrates thrust along the rotated body z axis minus gravity,
    the quaternion integrates the body rates and is renormalized, and the
    body rates relax toward the commanded rates with per-axis lag constants.
    """
    dt = params.dt
    pos = states[:, 0:3]
    vel = states[:, 3:6]
    quat = states[:, 6:10]
    rates = states[:, 10:13]
    rate_cmd = controls[:, 0:3]
    tau = controls[:, 3]

    acc = _quat_rotate_ez(quat) * (tau / params.mass)[:, None]
    acc[:, 2] -= params.gravity

    p, q, r = rates[:, 0], rates[:, 1], rates[:, 2]
    qw, qx, qy, qz = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    dquat = np.empty_like(quat)
    dquat[:, 0] = 0.5 * (-qx * p - qy * q - qz * r)
    dquat[:, 1] = 0.5 * (qw * p - qz * q + qy * r)
    dquat[:, 2] = 0.5 * (qz * p + qw * q - qx * r)
    dquat[:, 3] = 0.5 * (-qy * p + qx * q + qw * r)

    kappa = np.asarray(params.rate_lag)

    out = np.empty_like(states)
    out[:, 0:3] = pos + dt * vel
    out[:, 3:6] = vel + dt * acc
    new_quat = quat + dt * dquat
    norm = np.sqrt(np.sum(new_quat * new_quat, axis=1))
    if np.any(norm < 1e-12):
        raise InvalidStateError("quaternion collapsed to zero norm")
    out[:, 6:10] = new_quat / norm[:, None]
    out[:, 10:13] = rates + dt * (rate_cmd - rates) / kappa
    return out


@dataclass(frozen=True)
class Trajectory:
    """Visited states (T+1, n) and the applied (clamped) controls (T, m)."""

    states: np.ndarray
    controls: np.ndarray
    dt: float

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt


@dataclass(frozen=True)
class Model:
    """A dynamics model bundled with its parameters and actuator limits."""

    kind: str
    params: ModelParams = field(default_factory=ModelParams)
    limits: ControlLimits | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidStateError(f"unknown model kind: {self.kind!r}")
        if self.limits is None:
            object.__setattr__(self, "limits", default_limits(self.kind))
        if self.limits.lo.shape[0] != CONTROL_DIM[self.kind]:
            raise InvalidStateError(
                f"{self.kind} expects {CONTROL_DIM[self.kind]} control limits"
            )

    @property
    def state_dim(self) -> int:
        return STATE_DIM[self.kind]

    @property
    def control_dim(self) -> int:
        return CONTROL_DIM[self.kind]

    @property
    def position_dim(self) -> int:
        return POSITION_DIM[self.kind]

    def validate_state(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.shape != (self.state_dim,):
            raise InvalidStateError(
                f"expected state of shape ({self.state_dim},), got {state.shape}"
            )
        if not np.all(np.isfinite(state)):
            raise InvalidStateError("state contains non-finite entries")
        if self.kind == MULTIROTOR:
            qn = float(np.linalg.norm(state[6:10]))
            if abs(qn - 1.0) > 1e-6:
                raise InvalidStateError(f"quaternion norm {qn:.2e} is not 1")
        return state

    def step_batch(
        self, states: np.ndarray, controls: np.ndarray, clamp: bool = True
    ) -> np.ndarray:
        """Advance a batch of states one step. No input validation."""
        if clamp:
            controls = clamp_controls(controls, self.limits)
        if self.kind == DUBINS:
            return dubins_step_batch(states, controls, self.params.dt)
        return multirotor_step_batch(states, controls, self.params)

    def step(self, state: np.ndarray, control: np.ndarray, clamp: bool = True) -> np.ndarray:
        """Advance a single validated state one step."""
        state = self.validate_state(state)
        control = np.asarray(control, dtype=float)
        if control.shape != (self.control_dim,):
            raise InvalidStateError(
                f"expected control of shape ({self.control_dim},), got {control.shape}"
            )
        if not np.all(np.isfinite(control)):
            raise InvalidStateError("control contains non-finite entries")
        return self.step_batch(state[None, :], control[None, :], clamp=clamp)[0]

    def rollout(self, state0: np.ndarray, controls: np.ndarray) -> Trajectory:
        """Roll the model forward, clamping each control before applying it."""
        state0 = self.validate_state(state0)
        controls = np.asarray(controls, dtype=float)
        if controls.ndim != 2 or controls.shape[1] != self.control_dim:
            raise InvalidStateError(
                f"expected controls of shape (T, {self.control_dim}), got {controls.shape}"
            )
        horizon = controls.shape[0]
        states = np.empty((horizon + 1, self.state_dim))
        applied = np.empty_like(controls)
        states[0] = state0
        for k in range(horizon):
            applied[k] = clamp_controls(controls[k], self.limits)
            try:
                states[k + 1] = self.step_batch(
                    states[k][None, :], applied[k][None, :], clamp=False
                )[0]
            except InvalidStateError as exc:
                raise InvalidStateError(f"rollout failed at step {k}: {exc}") from exc
            if not np.all(np.isfinite(states[k + 1])):
                raise InvalidStateError(f"rollout diverged at step {k}")
        return Trajectory(states=states, controls=applied, dt=self.params.dt)


def make_model(kind: str, dt: float = 0.01, **param_overrides) -> Model:
    """Convenience constructor with stock limits."""
    return Model(kind=kind, params=ModelParams(dt=dt, **param_overrides))
