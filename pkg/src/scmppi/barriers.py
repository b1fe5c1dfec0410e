"""Safety constraints, barrier functions, and the discrete barrier state.

A constraint is a smooth margin function h with h > 0 on the safe set. The
barrier state beta aggregates B(h_i) over all constraints of a field and is
propagated alongside the plant state:

    beta' = sum_i B(h_i(F(x, u))) - gamma * (beta - sum_i B(h_i(x)))

With the inverse barrier B(h) = 1/h, beta staying finite along a trajectory
is equivalent to the trajectory staying strictly inside the safe set. The
relaxed barrier swaps the pole for a linear extrapolation below a knot
``delta`` so optimizers can evaluate infeasible iterates; it agrees with the
inverse barrier on h >= delta and is C1 at the knot.

The embedded state is the plain concatenation ``[state, beta]`` (beta last).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError, UnsafeEvaluationError
from .models import MODEL_KINDS, Model, clamp_controls

INVERSE = "inverse"
RELAXED = "relaxed"

BARRIER_KINDS = (INVERSE, RELAXED)

# Packed constraint row: [c1, c2, c3, s1, s2, s3, offset] so that
# h(p) = sum_d s_d * (p_d - c_d)^2 - offset for every constraint kind.
PACKED_WIDTH = 7


@dataclass(frozen=True)
class SafetyConstraint:
    """A spherical or ellipsoidal keep-out region, inflated by the vehicle radius.

    Margins:
      sphere:    h(p) = ||p - c||^2 - r^2 - r_v^2
      ellipsoid: h(p) = sum_d ((p_d - c_d) / a_d)^2 - 1 - r_v^2 / min(a)^2
    """

    center: np.ndarray
    radii: np.ndarray
    kind: str
    vehicle_radius: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        radii = np.asarray(self.radii, dtype=float)
        if center.ndim != 1 or center.shape[0] not in (2, 3):
            raise InvalidStateError("constraint center must be a 2- or 3-vector")
        if radii.shape != center.shape:
            raise InvalidStateError("constraint radii must match center shape")
        if np.any(radii <= 0) or self.vehicle_radius < 0:
            raise InvalidStateError("constraint radii must be positive")
        if self.kind not in ("sphere", "ellipsoid"):
            raise InvalidStateError(f"unknown constraint kind: {self.kind!r}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)

    @staticmethod
    def sphere(center, radius: float, vehicle_radius: float) -> "SafetyConstraint":
        center = np.asarray(center, dtype=float)
        return SafetyConstraint(
            center=center,
            radii=np.full(center.shape, float(radius)),
            kind="sphere",
            vehicle_radius=float(vehicle_radius),
        )

    @staticmethod
    def ellipsoid(center, radii, vehicle_radius: float) -> "SafetyConstraint":
        return SafetyConstraint(
            center=np.asarray(center, dtype=float),
            radii=np.asarray(radii, dtype=float),
            kind="ellipsoid",
            vehicle_radius=float(vehicle_radius),
        )

    @property
    def position_dim(self) -> int:
        return self.center.shape[0]

    def packed_row(self) -> np.ndarray:
        row = np.zeros(PACKED_WIDTH)
        d = self.position_dim
        row[0:d] = self.center
        if self.kind == "sphere":
            row[3:3 + d] = 1.0
            row[6] = float(self.radii[0]) ** 2 + self.vehicle_radius**2
        else:
            row[3:3 + d] = 1.0 / self.radii**2
            row[6] = 1.0 + self.vehicle_radius**2 / float(np.min(self.radii)) ** 2
        return row

    def margin(self, position: np.ndarray) -> float:
        return float(self.margin_batch(np.asarray(position, dtype=float)[None, :])[0])

    def margin_batch(self, positions: np.ndarray) -> np.ndarray:
        """Margins for positions of shape (B, d)."""
        row = self.packed_row()
        d = self.position_dim
        diff = positions[:, :d] - row[0:d]
        return np.sum(row[3:3 + d] * diff * diff, axis=1) - row[6]


@dataclass(frozen=True)
class ObstacleField:
    """An immutable collection of safety constraints over one workspace."""

    constraints: tuple[SafetyConstraint, ...] = ()

    def __post_init__(self):
        constraints = tuple(self.constraints)
        dims = {c.position_dim for c in constraints}
        if len(dims) > 1:
            raise InvalidStateError("all constraints must share a position dimension")
        object.__setattr__(self, "constraints", constraints)
        object.__setattr__(self, "_packed", None)

    def __len__(self) -> int:
        return len(self.constraints)

    @property
    def position_dim(self) -> int | None:
        return self.constraints[0].position_dim if self.constraints else None

    def packed(self) -> np.ndarray:
        if self._packed is None:
            rows = (
                np.stack([c.packed_row() for c in self.constraints])
                if self.constraints
                else np.zeros((0, PACKED_WIDTH))
            )
            object.__setattr__(self, "_packed", rows)
        return self._packed

    def margins(self, state: np.ndarray) -> np.ndarray:
        """Margins of every constraint at one state (leading components = position)."""
        return self.margins_batch(np.asarray(state, dtype=float)[None, :])[0]

    def margins_batch(self, states: np.ndarray) -> np.ndarray:
        """Margins for states of shape (B, n), returned as (B, n_constraints)."""
        if not self.constraints:
            return np.zeros((states.shape[0], 0))
        packed = self.packed()
        d = self.position_dim
        diff = states[:, None, :d] - packed[None, :, 0:d]
        return np.sum(packed[None, :, 3:3 + d] * diff * diff, axis=2) - packed[None, :, 6]

    def min_margin(self, state: np.ndarray) -> float:
        h = self.margins(state)
        return float(np.min(h)) if h.size else np.inf


@dataclass(frozen=True)
class BarrierConfig:
    """Barrier kind plus the recursion and relaxation parameters.

    ``gamma`` tunes the discrete barrier-state recursion (|gamma| <= 1); it
    keeps the barrier gradient alive even where the instantaneous margin is
    flat. ``delta`` is the relaxation knot of the relaxed barrier.
    """

    kind: str = RELAXED
    gamma: float = 0.0
    delta: float = 1e-2

    def __post_init__(self):
        if self.kind not in BARRIER_KINDS:
            raise InvalidStateError(f"unknown barrier kind: {self.kind!r}")
        if not abs(self.gamma) <= 1.0:
            raise InvalidStateError("|gamma| must be <= 1")
        if not self.delta > 0:
            raise InvalidStateError("delta must be positive")


def barrier(h, cfg: BarrierConfig):
    """Elementwise barrier value B(h). Scalar in, scalar out.

    The inverse barrier raises on h <= 0; the relaxed barrier extrapolates
    linearly below ``delta`` with matched value and slope at the knot.
    """
    h_arr = np.asarray(h, dtype=float)
    if cfg.kind == INVERSE:
        if np.any(h_arr <= 0):
            raise UnsafeEvaluationError("inverse barrier evaluated at h <= 0")
        out = 1.0 / h_arr
    else:
        delta = cfg.delta
        out = np.empty_like(h_arr)
        hi = h_arr >= delta
        out[hi] = 1.0 / h_arr[hi]
        out[~hi] = (2.0 * delta - h_arr[~hi]) / (delta * delta)
    return out if np.ndim(h) else float(out)


def barrier_state(state: np.ndarray, field: ObstacleField, cfg: BarrierConfig) -> float:
    """Aggregate barrier state at a plant state: beta = sum_i B(h_i(state))."""
    return float(barrier_state_batch(np.asarray(state, dtype=float)[None, :], field, cfg)[0])


def barrier_state_batch(
    states: np.ndarray, field: ObstacleField, cfg: BarrierConfig
) -> np.ndarray:
    if not len(field):
        return np.zeros(states.shape[0])
    h = field.margins_batch(states)
    return np.sum(barrier(h, cfg), axis=1)


def dbas_step(
    state_next: np.ndarray,
    state: np.ndarray,
    beta: float,
    field: ObstacleField,
    cfg: BarrierConfig,
) -> float:
    """One step of the discrete barrier-state recursion."""
    return float(
        dbas_step_batch(
            np.asarray(state_next, dtype=float)[None, :],
            np.asarray(state, dtype=float)[None, :],
            np.array([beta], dtype=float),
            field,
            cfg,
        )[0]
    )


def dbas_step_batch(
    states_next: np.ndarray,
    states: np.ndarray,
    betas: np.ndarray,
    field: ObstacleField,
    cfg: BarrierConfig,
) -> np.ndarray:
    b_next = barrier_state_batch(states_next, field, cfg)
    b_here = barrier_state_batch(states, field, cfg)
    return b_next - cfg.gamma * (betas - b_here)


def embed(state: np.ndarray, field: ObstacleField, cfg: BarrierConfig) -> np.ndarray:
    """Append the barrier state: [state, beta(state)]."""
    state = np.asarray(state, dtype=float)
    return np.append(state, barrier_state(state, field, cfg))


def split(embedded: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of :func:`embed`."""
    embedded = np.asarray(embedded, dtype=float)
    return embedded[:-1], float(embedded[-1])


def embedded_step(
    embedded_state: np.ndarray,
    control: np.ndarray,
    model: Model,
    field: ObstacleField,
    cfg: BarrierConfig,
    clamp: bool = True,
) -> np.ndarray:
    """Advance the embedded state [x, beta] one step."""
    out = embedded_step_batch(
        np.asarray(embedded_state, dtype=float)[None, :],
        np.asarray(control, dtype=float)[None, :],
        model,
        field,
        cfg,
        clamp=clamp,
    )
    return out[0]


def embedded_step_batch(
    embedded_states: np.ndarray,
    controls: np.ndarray,
    model: Model,
    field: ObstacleField,
    cfg: BarrierConfig,
    clamp: bool = True,
) -> np.ndarray:
    """Batched embedded step used by the trajectory optimizer.

    Plant rows advance by the model dynamics, the barrier row by the
    discrete barrier-state recursion. Relaxed-barrier fields step through
    the selected compiled kernel when one is loaded; the inverse barrier
    always takes the numpy path so unsafe evaluations raise.
    """
    states = embedded_states[:, :-1]
    betas = embedded_states[:, -1]
    compiled = _compiled_embedded_step(cfg)
    if compiled is not None:
        if clamp:
            controls = clamp_controls(controls, model.limits)
        return compiled(
            MODEL_KINDS.index(model.kind),
            model.params.packed(),
            np.ascontiguousarray(states, dtype=float),
            np.ascontiguousarray(controls, dtype=float),
            np.ascontiguousarray(betas, dtype=float),
            field.packed(),
            model.position_dim,
            cfg.gamma,
            cfg.delta,
        )
    states_next = model.step_batch(states, controls, clamp=clamp)
    betas_next = dbas_step_batch(states_next, states, betas, field, cfg)
    return np.concatenate([states_next, betas_next[:, None]], axis=1)


def _compiled_embedded_step(cfg: BarrierConfig):
    if cfg.kind != RELAXED:
        return None
    from .kernels import get_backend

    return getattr(get_backend(), "embedded_step_batch", None)


def embedded_rollout(
    embedded_state0: np.ndarray,
    controls: np.ndarray,
    model: Model,
    field: ObstacleField,
    cfg: BarrierConfig,
    clamp: bool = True,
) -> np.ndarray:
    """Roll the embedded model forward; returns states of shape (T+1, n+1)."""
    controls = np.asarray(controls, dtype=float)
    horizon = controls.shape[0]
    out = np.empty((horizon + 1, len(embedded_state0)))
    out[0] = embedded_state0
    for k in range(horizon):
        try:
            out[k + 1] = embedded_step(out[k], controls[k], model, field, cfg, clamp=clamp)
        except UnsafeEvaluationError as exc:
            raise UnsafeEvaluationError(f"embedded rollout left the safe set at step {k}: {exc}") from exc
    return out


def is_safe_state(state: np.ndarray, field: ObstacleField) -> bool:
    return field.min_margin(np.asarray(state, dtype=float)) > 0.0


def is_safe_trajectory(states: np.ndarray, field: ObstacleField) -> tuple[bool, int]:
    """Check h > 0 at every visited state.

    Returns ``(safe, first_violation_index)`` with index -1 when safe.
    """
    states = np.asarray(states, dtype=float)
    if not len(field):
        return True, -1
    h = field.margins_batch(states)
    bad = np.any(h <= 0.0, axis=1)
    if not np.any(bad):
        return True, -1
    return False, int(np.argmax(bad))
