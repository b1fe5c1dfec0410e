"""Information-theoretic MPPI on the barrier-embedded model.

One controller update runs P rounds of: sample Gaussian control
perturbations, roll out all samples through the embedded dynamics, score
them with the path cost, softmax-weight with a min-cost baseline, and
re-average the control sequence. Unsafe samples receive the cost cap; after
baseline subtraction their exponential weight underflows to zero whenever
any safe sample exists, so they carry no mass in the update.

The same sampling engine also serves the safety-controlled sampler (the
``sc_mppi`` module) which injects per-sample barrier-state feedback through
``nu`` and a gain sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .barriers import BarrierConfig, ObstacleField, barrier_state, is_safe_trajectory
from .errors import DegenerateBatchError, InvalidStateError
from .kernels import get_backend
from .models import MODEL_KINDS, Model

COST_CAP = 1e8

_KIND_INDEX = {kind: i for i, kind in enumerate(MODEL_KINDS)}


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling parameters: batch size, horizon, temperature, covariance.

    ``sigma`` holds the diagonal of the sampling covariance (variances,
    sigma_i^2). ``alpha`` in [0, 1] smooths the control cost; at alpha = 1
    the control penalty vanishes.
    """

    n_samples: int
    horizon: int
    lam: float
    sigma: np.ndarray
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if self.n_samples < 1:
            raise InvalidStateError("need at least one sample")
        if self.horizon < 1:
            raise InvalidStateError("horizon must be at least 1")
        if not self.lam > 0:
            raise InvalidStateError("lambda must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidStateError("alpha must lie in [0, 1]")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise InvalidStateError("sigma diagonal must be finite and nonnegative")
        object.__setattr__(self, "sigma", sigma)

    def sigma_inv(self) -> np.ndarray:
        """Inverse covariance diagonal; zero variance contributes zero cost."""
        out = np.zeros_like(self.sigma)
        nz = self.sigma > 0
        out[nz] = 1.0 / self.sigma[nz]
        return out


@dataclass(frozen=True)
class PathCostParams:
    """Quadratic stage/terminal weights about a goal state, all diagonals.

    ``q_beta`` penalizes the barrier state in the stage cost (the
    barrier-in-cost MPPI variant); the safety-controlled variant sets it to
    zero and pays for feedback effort instead.
    """

    goal: np.ndarray
    q_diag: np.ndarray
    r_diag: np.ndarray
    phi_diag: np.ndarray
    q_beta: float = 0.0
    phi_beta: float = 0.0
    rfb_diag: np.ndarray | None = None

    def __post_init__(self):
        goal = np.asarray(self.goal, dtype=float)
        q = np.asarray(self.q_diag, dtype=float)
        r = np.asarray(self.r_diag, dtype=float)
        phi = np.asarray(self.phi_diag, dtype=float)
        rfb = self.rfb_diag
        rfb = r * 0.0 if rfb is None else np.asarray(rfb, dtype=float)
        if q.shape != goal.shape or phi.shape != goal.shape:
            raise InvalidStateError("q_diag/phi_diag must match the goal dimension")
        if rfb.shape != r.shape:
            raise InvalidStateError("rfb_diag must match the control dimension")
        for name, arr in (("q", q), ("r", r), ("phi", phi), ("rfb", rfb)):
            if np.any(arr < 0):
                raise InvalidStateError(f"{name} weights must be nonnegative")
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "q_diag", q)
        object.__setattr__(self, "r_diag", r)
        object.__setattr__(self, "phi_diag", phi)
        object.__setattr__(self, "rfb_diag", rfb)


@dataclass
class SampleBatch:
    """Outputs of one sampling round, kept for diagnostics."""

    noise: np.ndarray            # (N, T, m)
    costs: np.ndarray            # (N,)
    safe: np.ndarray             # (N,) bool
    weights: np.ndarray          # (N,) zeros if the round was degenerate
    safe_steps: np.ndarray       # (N,) visited safe states before first violation
    min_h: np.ndarray            # (N,) per-sample minimum margin
    kfb_abs: np.ndarray          # (T,) per-step mean |k_fb|
    degenerate: bool = False

    @property
    def safe_rate(self) -> float:
        return float(np.mean(self.safe))


@dataclass
class StepDiagnostics:
    """Per-controller-update diagnostics stream."""

    safe_rate: float
    min_cost: float
    mean_cost: float
    eta: float
    degenerate_rounds: int = 0
    ddp_iterations: int = 0
    reference_corrected: bool = False
    mean_kfb: float = 0.0


def sample_noise(cfg: SamplerConfig, iteration: int, control_dim: int | None = None) -> np.ndarray:
    """Draw the (N, T, m) perturbation tensor for one optimization round.

    Counter-based: the Philox stream is keyed by the config seed with the
    round index in the counter block, so identical (seed, iteration) pairs
    produce bit-identical tensors and distinct rounds never overlap.
    """
    m = len(cfg.sigma) if control_dim is None else control_dim
    shape = (cfg.n_samples, cfg.horizon, m)
    if np.all(cfg.sigma == 0.0):
        return np.zeros(shape)
    bitgen = np.random.Philox(key=cfg.seed, counter=[0, 0, 0, iteration])
    rng = np.random.Generator(bitgen)
    return rng.standard_normal(shape) * np.sqrt(cfg.sigma)


def compute_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    """Min-baseline softmax weights over sample costs."""
    weights, _ = _weights_and_eta(costs, lam)
    return weights


def _weights_and_eta(costs: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    best = float(np.min(costs))
    if best >= COST_CAP:
        raise DegenerateBatchError("every sample hit the cost cap")
    scaled = np.exp(-(costs - best) / lam)
    eta = float(np.sum(scaled))
    return scaled / eta, eta


def update_controls(nominal: np.ndarray, noise: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted re-averaging u*_k = sum_n w^n (u_k + eps^n_k)."""
    return np.einsum("n,ntm->tm", weights, nominal[None, :, :] + noise)


def path_cost(
    embedded_states: np.ndarray,
    controls: np.ndarray,
    noise: np.ndarray,
    params: PathCostParams,
    cfg: SamplerConfig,
    field: ObstacleField,
) -> tuple[float, bool]:
    """Cost of one already-rolled embedded trajectory (no feedback terms).

    Mirrors the sampler's accounting exactly: stage and control terms run
    over k = 1..T-1, the terminal term applies at T, and safety is judged on
    the visited states k = 1..T. Unsafe trajectories return the cap.
    """
    states = embedded_states[:, :-1]
    betas = embedded_states[:, -1]
    horizon = controls.shape[0]
    sig_inv = cfg.sigma_inv()
    r_sig = params.r_diag * sig_inv
    smooth = 0.5 * cfg.lam * (1.0 - cfg.alpha)
    cost = 0.0
    for k in range(1, horizon):
        dx = states[k] - params.goal
        cost += float(dx @ (params.q_diag * dx)) + params.q_beta * betas[k] ** 2
        cost += smooth * float((controls[k] + 2.0 * noise[k]) @ (r_sig * controls[k]))
    dx = states[horizon] - params.goal
    cost += float(dx @ (params.phi_diag * dx)) + params.phi_beta * betas[horizon] ** 2
    safe, _ = is_safe_trajectory(states[1:], field)
    if not safe or not np.isfinite(cost):
        return COST_CAP, False
    return cost, True


def _rollout_samples(
    x0: np.ndarray,
    nominal: np.ndarray,
    noise: np.ndarray,
    gains: np.ndarray,
    nu: float,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    params: PathCostParams,
    cfg: SamplerConfig,
    backend,
    keep: int = 0,
    beta0: float | None = None,
):
    if beta0 is None:
        beta0 = barrier_state(x0, fld, bcfg)
    return backend.rollout_batch(
        model_kind=_KIND_INDEX[model.kind],
        params=model.params.packed(),
        lo=model.limits.lo,
        hi=model.limits.hi,
        x0=np.asarray(x0, dtype=float),
        beta0=beta0,
        nominal=np.ascontiguousarray(nominal),
        noise=np.ascontiguousarray(noise),
        gains=np.ascontiguousarray(gains),
        nu=nu,
        obstacles=fld.packed(),
        pos_dim=model.position_dim,
        gamma=bcfg.gamma,
        delta=bcfg.delta,
        goal=params.goal,
        q_diag=params.q_diag,
        q_beta=params.q_beta,
        phi_diag=params.phi_diag,
        phi_beta=params.phi_beta,
        r_diag=params.r_diag,
        rfb_diag=params.rfb_diag,
        sigma_inv_diag=cfg.sigma_inv(),
        lam=cfg.lam,
        alpha=cfg.alpha,
        cap=COST_CAP,
        keep=keep,
    )


def run_sampling_rounds(
    x0: np.ndarray,
    nominal: np.ndarray,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    params: PathCostParams,
    cfg: SamplerConfig,
    iterations: int,
    iteration_base: int = 0,
    feedback_provider=None,
    backend=None,
) -> tuple[np.ndarray, SampleBatch, StepDiagnostics]:
    """Shared engine: P rounds of sample/score/weight/update.

    ``feedback_provider(nominal)``, when given, maps the current reference to
    ``(safe_nominal, gains, nu, info_dict)`` before each round (the
    safety-controlled sampler); plain MPPI uses the reference as-is with no
    feedback. Returns the refined sequence, the last round's batch, and
    aggregated diagnostics. A degenerate round (all samples capped) leaves
    the reference unchanged for that round.
    """
    if backend is None:
        backend = get_backend()
    nominal = np.array(nominal, dtype=float)
    horizon, m = nominal.shape
    if horizon != cfg.horizon:
        raise InvalidStateError(
            f"nominal horizon {horizon} does not match config horizon {cfg.horizon}"
        )
    zero_gains = np.zeros((horizon, m))
    degenerate_rounds = 0
    ddp_iters_total = 0
    corrected = False
    batch = None
    safe_rates = []
    min_costs = []
    mean_costs = []
    eta_last = 0.0
    for i in range(iterations):
        if feedback_provider is not None:
            nominal, gains, nu, fb_info = feedback_provider(nominal)
            ddp_iters_total += fb_info.get("iterations", 0)
            corrected = corrected or fb_info.get("corrected", False)
        else:
            gains, nu = zero_gains, 0.0
        noise = sample_noise(cfg, iteration_base + i, control_dim=m)
        costs, min_h, viol, kfb_abs, _ = _rollout_samples(
            x0, nominal, noise, gains, nu, model, fld, bcfg, params, cfg, backend
        )
        safe = viol < 0
        safe_steps = np.where(safe, horizon, viol - 1).astype(np.int64)
        try:
            weights, eta_last = _weights_and_eta(costs, cfg.lam)
            nominal = update_controls(nominal, noise, weights)
            degenerate = False
        except DegenerateBatchError:
            weights = np.zeros_like(costs)
            degenerate = True
            degenerate_rounds += 1
        batch = SampleBatch(
            noise=noise, costs=costs, safe=safe, weights=weights,
            safe_steps=safe_steps, min_h=min_h, kfb_abs=kfb_abs,
            degenerate=degenerate,
        )
        safe_rates.append(batch.safe_rate)
        min_costs.append(float(np.min(costs)))
        mean_costs.append(float(np.mean(costs)))
    diag = StepDiagnostics(
        safe_rate=float(np.mean(safe_rates)),
        min_cost=min_costs[-1],
        mean_cost=mean_costs[-1],
        eta=eta_last,
        degenerate_rounds=degenerate_rounds,
        ddp_iterations=ddp_iters_total,
        reference_corrected=corrected,
        mean_kfb=float(np.mean(batch.kfb_abs)) if batch is not None else 0.0,
    )
    return nominal, batch, diag


def mppi_step(
    x0: np.ndarray,
    nominal: np.ndarray,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    params: PathCostParams,
    cfg: SamplerConfig,
    iterations: int = 1,
    iteration_base: int = 0,
    backend=None,
) -> tuple[np.ndarray, SampleBatch, StepDiagnostics]:
    """One MPPI controller update: P sampling rounds on the embedded model."""
    if iterations < 1:
        raise InvalidStateError("need at least one optimization round")
    return run_sampling_rounds(
        x0, nominal, model, fld, bcfg, params, cfg,
        iterations=iterations, iteration_base=iteration_base, backend=backend,
    )


def shift_controls(nominal: np.ndarray) -> np.ndarray:
    """Receding-horizon shift: drop the applied first control, repeat the last."""
    out = np.empty_like(nominal)
    out[:-1] = nominal[1:]
    out[-1] = nominal[-1]
    return out


@dataclass
class MPPIController:
    """Stateful wrapper running mppi_step over an episode."""

    model: Model
    fld: ObstacleField
    barrier_cfg: BarrierConfig
    params: PathCostParams
    cfg: SamplerConfig
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
        self.nominal, batch, diag = mppi_step(
            x0, self.nominal, self.model, self.fld, self.barrier_cfg,
            self.params, self.cfg, iterations=self.iterations,
            iteration_base=self._round, backend=self._backend,
        )
        self._round += self.iterations
        return self.nominal[0].copy(), batch, diag

    def advance(self):
        """Shift the plan after the first control has been applied."""
        self.nominal = shift_controls(self.nominal)
