"""Closed-loop MPC episodes, randomized trials, and navigation metrics.

An episode samples start and goal states from uniform boxes, runs one of
three controllers (receding-horizon trajectory optimization, plain sampling,
or safety-controlled sampling) in a plan/apply/shift loop, and scores the
executed plant trajectory. Safety violation means some visited state has a
nonpositive constraint margin; the episode keeps running after a violation.
Completion means entering the goal radius, a latched event that ends the
episode. Position RMSE is measured against the goal over the final half
second of the episode, and velocity statistics come from the velocity states
(or position differences for models without them). Mean safe-sample rate
averages the per-step fraction of safe samples over the controller's
batches.

Trials run many episodes on independently derived seed streams, optionally
across worker processes. Aggregation is a deterministic fold in episode
order, so a trial summary depends only on the configuration and base seed,
never on the worker count or scheduling. Crashed episodes (any violation)
are excluded from the RMSE and velocity aggregates; completion time
aggregates over completed episodes only.
"""

from __future__ import annotations

import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .barriers import BarrierConfig, ObstacleField, embed
from .ddp import QuadraticCost, solve
from .errors import InvalidStateError, ScmppiError
from .models import MULTIROTOR, Model, Trajectory, clamp_controls
from .mppi import (
    MPPIController,
    PathCostParams,
    SamplerConfig,
    StepDiagnostics,
    shift_controls,
)
from .sc_mppi import SafeSamplerConfig, SCMPPIController

DDP_CONTROLLER = "ddp"
MPPI_CONTROLLER = "mppi"
SCMPPI_CONTROLLER = "scmppi"
CONTROLLER_KINDS = (DDP_CONTROLLER, MPPI_CONTROLLER, SCMPPI_CONTROLLER)

RMSE_WINDOW_S = 0.5


@dataclass
class MPCDDPController:
    """Receding-horizon trajectory optimizer with first-control application."""

    model: Model
    fld: ObstacleField
    barrier_cfg: BarrierConfig
    cost: QuadraticCost
    horizon: int
    max_iters: int = 10
    nominal: np.ndarray | None = None

    def __post_init__(self):
        if self.nominal is None:
            self.nominal = np.zeros((self.horizon, self.model.control_dim))
        else:
            self.nominal = np.array(self.nominal, dtype=float)

    def plan(self, x0: np.ndarray):
        """Re-solve from x0; returns (first control, None, diagnostics)."""
        s0 = embed(np.asarray(x0, dtype=float), self.fld, self.barrier_cfg)
        policy, info = solve(
            s0, self.nominal, self.cost, self.model, self.fld, self.barrier_cfg,
            max_iters=self.max_iters,
        )
        self.nominal = policy.ref_controls
        trace = info["trace"]
        diag = StepDiagnostics(
            safe_rate=math.nan,
            min_cost=info["cost"],
            mean_cost=info["cost"],
            eta=0.0,
            ddp_iterations=info["iterations"],
            reference_corrected=trace[-1] < trace[0],
        )
        return self.nominal[0].copy(), None, diag

    def advance(self):
        self.nominal = shift_controls(self.nominal)


@dataclass(frozen=True)
class EpisodeConfig:
    """One episode's plant, field, controller selection, and randomization.

    ``start_box`` and ``goal_box`` are (2, n) arrays of elementwise uniform
    bounds over the full state; fixing an entry means equal bounds. The
    sampled goal replaces the goal inside the cost parameters, so the
    bundled ``params``/``ddp_cost`` goals act as box centers only.
    ``domain`` optionally bounds the vehicle position; leaving it ends the
    episode early as a non-completion.
    """

    controller: str
    model: Model
    fld: ObstacleField
    barrier_cfg: BarrierConfig
    start_box: np.ndarray
    goal_box: np.ndarray
    problem_horizon: int
    planning_horizon: int
    params: PathCostParams | None = None
    sampler: SamplerConfig | None = None
    ddp_cost: QuadraticCost | None = None
    iterations: int = 1
    ddp_max_iters: int = 10
    completion_radius: float = 0.5
    domain: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.controller not in CONTROLLER_KINDS:
            raise InvalidStateError(f"unknown controller kind: {self.controller!r}")
        if not self.completion_radius > 0:
            raise InvalidStateError("completion radius must be positive")
        if self.problem_horizon < 1:
            raise InvalidStateError("problem horizon must be at least 1")
        if not 1 <= self.planning_horizon <= self.problem_horizon:
            raise InvalidStateError(
                "planning horizon must lie in [1, problem horizon]"
            )
        n = self.model.state_dim
        for name, box in (("start_box", self.start_box), ("goal_box", self.goal_box)):
            arr = np.asarray(box, dtype=float)
            if arr.shape != (2, n):
                raise InvalidStateError(f"{name} must have shape (2, {n})")
            if np.any(arr[0] > arr[1]):
                raise InvalidStateError(f"{name} lower bounds exceed upper bounds")
            object.__setattr__(self, name, arr)
        if self.controller == DDP_CONTROLLER:
            if self.ddp_cost is None:
                raise InvalidStateError("ddp controller needs ddp_cost")
        else:
            if self.sampler is None or self.params is None:
                raise InvalidStateError(f"{self.controller} needs sampler and params")
            if self.sampler.horizon != self.planning_horizon:
                raise InvalidStateError(
                    "sampler horizon must equal the planning horizon"
                )
        if self.controller == SCMPPI_CONTROLLER:
            if not isinstance(self.sampler, SafeSamplerConfig):
                raise InvalidStateError("scmppi needs a SafeSamplerConfig")
            if self.ddp_cost is None:
                raise InvalidStateError("scmppi needs ddp_cost")
        if self.domain is not None:
            dom = np.asarray(self.domain, dtype=float)
            if dom.shape != (2, self.model.position_dim):
                raise InvalidStateError(
                    f"domain must have shape (2, {self.model.position_dim})"
                )
            if np.any(dom[0] >= dom[1]):
                raise InvalidStateError("domain lower bounds must be below upper")
            object.__setattr__(self, "domain", dom)


@dataclass
class EpisodeStats:
    """Per-episode metrics over the executed plant trajectory."""

    safety_violated: bool
    completed: bool
    completion_time: float
    position_rmse: float
    avg_velocity: float
    max_velocity: float
    safe_sample_rate: float
    steps: int
    duration: float
    compute_time_ms: float = field(default=0.0, compare=False)
    failure: str | None = None


@dataclass
class TrialSummary:
    """Aggregate of independent episodes; means paired with population stds."""

    episodes: int
    violation_pct: float
    completion_pct: float
    completion_time: tuple[float, float]
    position_rmse: tuple[float, float]
    avg_velocity: tuple[float, float]
    max_velocity: tuple[float, float]
    safe_sample_rate_pct: tuple[float, float]
    failures: int


def episode_streams(seed: int) -> tuple[np.random.Generator, int]:
    """Derive the environment generator and the controller seed for one episode."""
    env_ss, ctl_ss = np.random.SeedSequence(seed).spawn(2)
    ctl_seed = int(ctl_ss.generate_state(1, dtype=np.uint64)[0])
    return np.random.default_rng(env_ss), ctl_seed


def sample_endpoints(cfg: EpisodeConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw the start and goal states from their uniform boxes."""
    start = rng.uniform(cfg.start_box[0], cfg.start_box[1])
    goal = rng.uniform(cfg.goal_box[0], cfg.goal_box[1])
    if cfg.model.kind == MULTIROTOR:
        for state in (start, goal):
            state[6:10] /= np.linalg.norm(state[6:10])
    return start, goal


def build_controller(cfg: EpisodeConfig, goal: np.ndarray, ctl_seed: int):
    """Materialize the configured controller around a sampled goal."""
    goal = np.asarray(goal, dtype=float)
    if cfg.controller == DDP_CONTROLLER:
        cost = dataclasses.replace(cfg.ddp_cost, goal=goal)
        return MPCDDPController(
            cfg.model, cfg.fld, cfg.barrier_cfg, cost,
            horizon=cfg.planning_horizon, max_iters=cfg.ddp_max_iters,
        )
    params = dataclasses.replace(cfg.params, goal=goal)
    sampler = dataclasses.replace(cfg.sampler, seed=ctl_seed)
    if cfg.controller == MPPI_CONTROLLER:
        return MPPIController(
            cfg.model, cfg.fld, cfg.barrier_cfg, params, sampler,
            iterations=cfg.iterations,
        )
    ddp_cost = dataclasses.replace(cfg.ddp_cost, goal=goal)
    return SCMPPIController(
        cfg.model, cfg.fld, cfg.barrier_cfg, params, sampler, ddp_cost,
        iterations=cfg.iterations,
    )


def safe_sample_rate(diags: list[StepDiagnostics]) -> float:
    """Mean per-step fraction of safe samples; NaN without sampling data."""
    rates = [d.safe_rate for d in diags if not math.isnan(d.safe_rate)]
    return float(np.mean(rates)) if rates else math.nan


def _inside_domain(position: np.ndarray, domain: np.ndarray | None) -> bool:
    if domain is None:
        return True
    return bool(np.all(position >= domain[0]) and np.all(position <= domain[1]))


def run_episode(cfg: EpisodeConfig) -> tuple[EpisodeStats, Trajectory, list[StepDiagnostics]]:
    """Execute one closed-loop episode and score it.

    The loop checks completion and domain membership at the current state,
    plans, applies the clamped first control, and shifts. A controller
    exception ends the episode with the failure recorded; violations never
    terminate it.
    """
    rng, ctl_seed = episode_streams(cfg.seed)
    start, goal = sample_endpoints(cfg, rng)
    controller = build_controller(cfg, goal, ctl_seed)
    model = cfg.model
    dt = model.params.dt
    pos_d = model.position_dim
    goal_pos = goal[:pos_d]

    states = [np.asarray(start, dtype=float)]
    controls: list[np.ndarray] = []
    diags: list[StepDiagnostics] = []
    plan_seconds: list[float] = []
    completed = False
    completion_time = 0.0
    failure = None

    x = states[0]
    for k in range(cfg.problem_horizon):
        if float(np.linalg.norm(x[:pos_d] - goal_pos)) < cfg.completion_radius:
            completed = True
            completion_time = k * dt
            break
        if not _inside_domain(x[:pos_d], cfg.domain):
            break
        tic = time.perf_counter()
        try:
            u0, _, diag = controller.plan(x)
        except ScmppiError as exc:
            failure = f"{type(exc).__name__}: {exc}"
            break
        plan_seconds.append(time.perf_counter() - tic)
        diags.append(diag)
        applied = clamp_controls(np.asarray(u0, dtype=float), model.limits)
        x = model.step(x, applied, clamp=False)
        controller.advance()
        states.append(x)
        controls.append(applied)
    else:
        if float(np.linalg.norm(x[:pos_d] - goal_pos)) < cfg.completion_radius:
            completed = True
            completion_time = cfg.problem_horizon * dt

    state_arr = np.asarray(states)
    control_arr = (
        np.asarray(controls)
        if controls
        else np.zeros((0, model.control_dim))
    )
    duration = control_arr.shape[0] * dt
    if not completed:
        completion_time = duration

    margins = cfg.fld.margins_batch(state_arr)
    violated = bool(margins.size and np.any(np.min(margins, axis=1) <= 0.0))

    window = max(1, int(round(RMSE_WINDOW_S / dt)))
    tail = state_arr[-window:, :pos_d]
    rmse = float(np.sqrt(np.mean(np.sum((tail - goal_pos) ** 2, axis=1))))

    if model.kind == MULTIROTOR:
        speeds = np.linalg.norm(state_arr[:, 3:6], axis=1)
    elif control_arr.shape[0] > 0:
        speeds = np.linalg.norm(np.diff(state_arr[:, :pos_d], axis=0), axis=1) / dt
    else:
        speeds = np.zeros(1)
    stats = EpisodeStats(
        safety_violated=violated,
        completed=completed,
        completion_time=completion_time,
        position_rmse=rmse,
        avg_velocity=float(np.mean(speeds)),
        max_velocity=float(np.max(speeds)),
        safe_sample_rate=safe_sample_rate(diags),
        steps=control_arr.shape[0],
        duration=duration,
        compute_time_ms=1000.0 * float(np.mean(plan_seconds)) if plan_seconds else 0.0,
        failure=failure,
    )
    return stats, Trajectory(states=state_arr, controls=control_arr, dt=dt), diags


def episode_seed(base_seed: int, index: int) -> int:
    """Independent per-episode seed, stable under any execution order."""
    ss = np.random.SeedSequence(base_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _run_indexed(args: tuple[EpisodeConfig, int]):
    cfg, index = args
    episode_cfg = dataclasses.replace(cfg, seed=episode_seed(cfg.seed, index))
    return run_episode(episode_cfg)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=float)
    return float(np.mean(arr)), float(np.std(arr))


def aggregate(stats: list[EpisodeStats]) -> TrialSummary:
    """Deterministic fold of per-episode stats into the trial summary."""
    clean = [s for s in stats if not s.safety_violated]
    rates = [
        100.0 * s.safe_sample_rate
        for s in stats
        if not math.isnan(s.safe_sample_rate)
    ]
    return TrialSummary(
        episodes=len(stats),
        violation_pct=100.0 * float(np.mean([s.safety_violated for s in stats])),
        completion_pct=100.0 * float(np.mean([s.completed for s in stats])),
        completion_time=_mean_std([s.completion_time for s in stats if s.completed]),
        position_rmse=_mean_std([s.position_rmse for s in clean]),
        avg_velocity=_mean_std([s.avg_velocity for s in clean]),
        max_velocity=_mean_std([s.max_velocity for s in clean]),
        safe_sample_rate_pct=_mean_std(rates),
        failures=sum(s.failure is not None for s in stats),
    )


def run_trials(
    cfg: EpisodeConfig,
    episodes: int,
    threads: int = 1,
    collect: bool = False,
) -> tuple[TrialSummary, list]:
    """Run independent episodes and aggregate them in index order.

    Returns ``(summary, results)`` where results holds per-episode
    ``(stats, trajectory, diagnostics)`` triples when ``collect`` is set and
    bare stats otherwise. Episodes execute concurrently when ``threads``
    exceeds one; results are always folded in episode order.
    """
    if episodes < 1:
        raise InvalidStateError("need at least one episode")
    if threads < 1:
        raise InvalidStateError("threads must be positive")
    tasks = [(cfg, i) for i in range(episodes)]
    if threads == 1:
        results = [_run_indexed(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_indexed, tasks))
    summary = aggregate([r[0] for r in results])
    return summary, results if collect else [r[0] for r in results]
