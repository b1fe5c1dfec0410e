"""Safety-controlled sampling: MPPI with barrier-state feedback per sample.

Each optimization round first runs the barrier-embedded trajectory optimizer
on the current reference, producing a corrected reference U_S and per-step
barrier gains K_bas. Every sampled rollout then applies

    u_applied,k = u_S,k + eps_k + nu * K_bas,k * beta_k

so samples drifting toward an obstacle (growing beta) are deflected by the
feedback while samples in free space (beta near 0) are left untouched. The
weight and update pipeline is shared verbatim with the plain sampler; the
feedback never folds into the returned control sequence, it is re-derived
from a fresh solve at the next round.

The barrier component is structurally the last entry of the embedded state,
and only the barrier-gain slice of the optimizer's policy is applied during
sampling; the state-feedback slice serves the optimizer's own line search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .barriers import BarrierConfig, ObstacleField, embed
from .ddp import FeedbackPolicy, QuadraticCost, rollout_reference, solve
from .errors import InvalidStateError, SolverFailureError
from .kernels import get_backend
from .models import Model, clamp_controls
from .mppi import (
    PathCostParams,
    SampleBatch,
    SamplerConfig,
    StepDiagnostics,
    _rollout_samples,
    run_sampling_rounds,
    shift_controls,
)


@dataclass(frozen=True)
class SafeSamplerConfig(SamplerConfig):
    """Sampler parameters plus the feedback scale and the inner solve budget.

    ``nu`` scales the barrier feedback applied inside every rollout;
    ``ddp_max_iters`` caps the reference-correction solve per round (0 turns
    the correction off, degenerating the sampler to plain MPPI when nu is
    also 0). The feedback penalty weight R_fb lives with the path cost
    parameters next to R.
    """

    nu: float = 1.0
    ddp_max_iters: int = 5

    def __post_init__(self):
        super().__post_init__()
        if self.nu < 0:
            raise InvalidStateError("feedback scale nu must be nonnegative")
        if self.ddp_max_iters < 0:
            raise InvalidStateError("ddp_max_iters must be nonnegative")


def compute_safe_feedback(
    embedded_state0: np.ndarray,
    nominal: np.ndarray,
    cost: QuadraticCost,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    max_iters: int,
) -> tuple[np.ndarray, FeedbackPolicy, dict]:
    """Correct a (possibly unsafe) reference and extract barrier gains.

    Returns ``(U_S, policy, info)``. With ``max_iters`` 0 the reference
    passes through untouched under an identity (zero-gain) policy whose
    recorded trajectory is the clamped rollout. A solver failure falls back
    to the same identity policy with ``info["failed"]`` set, so the caller
    degenerates to plain sampling instead of aborting.
    """
    nominal = np.asarray(nominal, dtype=float)
    if max_iters <= 0:
        ref = rollout_reference(
            embedded_state0, clamp_controls(nominal, model.limits), model, fld, bcfg
        )
        policy = FeedbackPolicy.identity(ref, nominal)
        return nominal, policy, {"iterations": 0, "corrected": False, "failed": False}
    try:
        policy, sinfo = solve(
            embedded_state0, nominal, cost, model, fld, bcfg, max_iters=max_iters
        )
    except SolverFailureError:
        ref = rollout_reference(
            embedded_state0, clamp_controls(nominal, model.limits), model, fld, bcfg
        )
        policy = FeedbackPolicy.identity(ref, nominal)
        return nominal, policy, {"iterations": 0, "corrected": False, "failed": True}
    info = {
        "iterations": sinfo["iterations"],
        "corrected": sinfo["trace"][-1] < sinfo["trace"][0],
        "failed": False,
    }
    return policy.ref_controls, policy, info


def scis_rollout(
    embedded_state0: np.ndarray,
    safe_nominal: np.ndarray,
    policy: FeedbackPolicy,
    noise: np.ndarray,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    params: PathCostParams,
    cfg: SafeSamplerConfig,
    backend=None,
) -> tuple[float, bool, float]:
    """Score one noise draw under barrier-state feedback.

    Returns ``(cost, safe, min_margin)`` for a single sample; the heavy
    batched path goes through the shared engine instead.
    """
    if backend is None:
        backend = get_backend()
    noise = np.asarray(noise, dtype=float)
    if noise.ndim != 2:
        raise InvalidStateError("scis_rollout scores a single (T, m) noise draw")
    if policy.horizon < noise.shape[0]:
        raise InvalidStateError("policy horizon shorter than the noise draw")
    embedded_state0 = np.asarray(embedded_state0, dtype=float)
    costs, min_h, viol, _, _ = _rollout_samples(
        embedded_state0[:-1], np.asarray(safe_nominal, dtype=float),
        noise[None, :, :], policy.K_bas[: noise.shape[0]], cfg.nu,
        model, fld, bcfg, params, cfg, backend,
        beta0=float(embedded_state0[-1]),
    )
    return float(costs[0]), bool(viol[0] < 0), float(min_h[0])


def sc_mppi_step(
    x0: np.ndarray,
    nominal: np.ndarray,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    params: PathCostParams,
    cfg: SafeSamplerConfig,
    ddp_cost: QuadraticCost,
    iterations: int = 1,
    iteration_base: int = 0,
    backend=None,
) -> tuple[np.ndarray, SampleBatch, StepDiagnostics]:
    """One safety-controlled controller update: P corrected sampling rounds."""
    if iterations < 1:
        raise InvalidStateError("need at least one optimization round")
    x0 = np.asarray(x0, dtype=float)

    def provider(current_nominal):
        s0bar = embed(x0, fld, bcfg)
        safe_nominal, policy, info = compute_safe_feedback(
            s0bar, current_nominal, ddp_cost, model, fld, bcfg, cfg.ddp_max_iters
        )
        return safe_nominal, policy.K_bas, cfg.nu, info

    return run_sampling_rounds(
        x0, nominal, model, fld, bcfg, params, cfg, iterations,
        iteration_base=iteration_base, feedback_provider=provider, backend=backend,
    )


@dataclass
class SCMPPIController:
    """Stateful wrapper running sc_mppi_step over an episode."""

    model: Model
    fld: ObstacleField
    barrier_cfg: BarrierConfig
    params: PathCostParams
    cfg: SafeSamplerConfig
    ddp_cost: QuadraticCost
    iterations: int = 1
    nominal: np.ndarray | None = None
    backend_name: str | None = None
    _round: int = field(default=0, init=False)

    def __post_init__(self):
        if self.nominal is None:
            self.nominal = np.zeros((self.cfg.horizon, self.model.control_dim))
        else:
            self.nominal = np.array(self.nominal, dtype=float)
        self._backend = get_backend(self.backend_name)

    def plan(self, x0: np.ndarray) -> tuple[np.ndarray, SampleBatch, StepDiagnostics]:
        """Refine the stored sequence at x0; returns (first control, batch, diag)."""
        self.nominal, batch, diag = sc_mppi_step(
            x0, self.nominal, self.model, self.fld, self.barrier_cfg,
            self.params, self.cfg, self.ddp_cost, iterations=self.iterations,
            iteration_base=self._round, backend=self._backend,
        )
        self._round += self.iterations
        return self.nominal[0].copy(), batch, diag

    def advance(self):
        """Shift the plan after the first control has been applied."""
        self.nominal = shift_controls(self.nominal)
