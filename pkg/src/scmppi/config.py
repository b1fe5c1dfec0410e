"""Experiment configuration: YAML schema, validation, presets, episode wiring.

A config file is a key-value tree with one section per concern (model,
field, barrier, episode, cost, sampler, safe, solver, optimizer). Matrix
weights are stored as diagonal lists. Parsing is strict: unknown keys and
dimension mismatches are rejected with the offending key path. A parsed
config is a frozen tree of plain Python values, so ``parse_config`` and
``serialize_config`` round-trip structurally and ``config_hash`` is stable
across processes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import importlib.resources
import json
from dataclasses import dataclass

import numpy as np
import yaml

from .barriers import BARRIER_KINDS, BarrierConfig, ObstacleField, SafetyConstraint
from .ddp import QuadraticCost
from .errors import ConfigError, ScmppiError
from .harness import CONTROLLER_KINDS, DDP_CONTROLLER, SCMPPI_CONTROLLER, EpisodeConfig
from .models import MODEL_KINDS, make_model
from .mppi import PathCostParams, SamplerConfig
from .sc_mppi import SafeSamplerConfig

PRESET_PACKAGE = "scmppi.presets"


@dataclass(frozen=True)
class ObstacleSpec:
    """One spherical obstacle: center coordinates and radius."""

    center: tuple[float, ...]
    radius: float


@dataclass(frozen=True)
class ModelSection:
    kind: str
    dt: float


@dataclass(frozen=True)
class FieldSection:
    vehicle_radius: float
    obstacles: tuple[ObstacleSpec, ...]


@dataclass(frozen=True)
class BarrierSection:
    kind: str
    gamma: float
    delta: float


@dataclass(frozen=True)
class EpisodeSection:
    """Endpoint boxes, horizons, and trial defaults.

    ``start`` and ``goal`` are (lo, hi) pairs of full state vectors;
    equal bounds pin an entry. ``domain`` optionally bounds the vehicle
    position during execution.
    """

    start: tuple[tuple[float, ...], tuple[float, ...]]
    goal: tuple[tuple[float, ...], tuple[float, ...]]
    problem_horizon: int
    planning_horizon: int
    completion_radius: float
    seed: int
    episodes: int
    domain: tuple[tuple[float, ...], tuple[float, ...]] | None = None


@dataclass(frozen=True)
class CostSection:
    """Path-integral cost diagonals shared by the sampling controllers."""

    q: tuple[float, ...]
    r: tuple[float, ...]
    phi: tuple[float, ...]
    q_beta: float
    phi_beta: float = 0.0
    rfb: tuple[float, ...] | None = None


@dataclass(frozen=True)
class SamplerSection:
    samples: int
    lam: float
    sigma: tuple[float, ...]
    alpha: float
    iterations: int


@dataclass(frozen=True)
class SafeSection:
    """Safety-controlled sampling overrides; unset entries inherit.

    ``alpha``/``q`` default to the sampler/cost values, ``q_beta`` defaults
    to zero (the safe sampler pays for feedback effort, not barrier
    magnitude).
    """

    nu: float = 1.0
    alpha: float | None = None
    q: tuple[float, ...] | None = None
    q_beta: float | None = None


@dataclass(frozen=True)
class SolverSection:
    """Embedded-model trajectory optimizer cost and iteration budget."""

    q: tuple[float, ...]
    r: tuple[float, ...]
    phi: tuple[float, ...]
    q_beta: float
    iterations: int
    phi_beta: float = 0.0
    control_ref: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; see module docstring for the schema."""

    name: str
    model: ModelSection
    field: FieldSection
    barrier: BarrierSection
    episode: EpisodeSection
    solver: SolverSection
    cost: CostSection | None = None
    sampler: SamplerSection | None = None
    safe: SafeSection = SafeSection()
    optimizer: SolverSection | None = None

    def goal_center(self) -> np.ndarray:
        lo, hi = self.episode.goal
        return (np.asarray(lo) + np.asarray(hi)) / 2.0

    def build_field(self) -> ObstacleField:
        rv = self.field.vehicle_radius
        return ObstacleField(
            tuple(
                SafetyConstraint.sphere(o.center, o.radius, rv)
                for o in self.field.obstacles
            )
        )

    def to_episode(self, controller: str) -> EpisodeConfig:
        """Wire the config into one controller's episode description."""
        if controller not in CONTROLLER_KINDS:
            raise ConfigError(f"unknown controller {controller!r}")
        model = make_model(self.model.kind, dt=self.model.dt)
        goal = self.goal_center()
        common = dict(
            controller=controller,
            model=model,
            fld=self.build_field(),
            barrier_cfg=BarrierConfig(
                kind=self.barrier.kind,
                gamma=self.barrier.gamma,
                delta=self.barrier.delta,
            ),
            start_box=np.asarray(self.episode.start, dtype=float),
            goal_box=np.asarray(self.episode.goal, dtype=float),
            problem_horizon=self.episode.problem_horizon,
            planning_horizon=self.episode.planning_horizon,
            completion_radius=self.episode.completion_radius,
            domain=None
            if self.episode.domain is None
            else np.asarray(self.episode.domain, dtype=float),
            seed=self.episode.seed,
        )
        if controller == DDP_CONTROLLER:
            opt = self.optimizer if self.optimizer is not None else self.solver
            return EpisodeConfig(
                **common,
                ddp_cost=_solver_cost(opt, goal),
                ddp_max_iters=opt.iterations,
            )
        if self.cost is None or self.sampler is None:
            raise ConfigError(
                f"controller {controller!r} needs the cost and sampler sections"
            )
        if controller == SCMPPI_CONTROLLER:
            params = PathCostParams(
                goal=goal,
                q_diag=np.asarray(
                    self.cost.q if self.safe.q is None else self.safe.q
                ),
                r_diag=np.asarray(self.cost.r),
                phi_diag=np.asarray(self.cost.phi),
                q_beta=0.0 if self.safe.q_beta is None else self.safe.q_beta,
                phi_beta=self.cost.phi_beta,
                rfb_diag=None if self.cost.rfb is None else np.asarray(self.cost.rfb),
            )
            sampler = SafeSamplerConfig(
                n_samples=self.sampler.samples,
                horizon=self.episode.planning_horizon,
                lam=self.sampler.lam,
                sigma=np.asarray(self.sampler.sigma),
                alpha=self.sampler.alpha if self.safe.alpha is None else self.safe.alpha,
                seed=self.episode.seed,
                nu=self.safe.nu,
                ddp_max_iters=self.solver.iterations,
            )
            return EpisodeConfig(
                **common,
                params=params,
                sampler=sampler,
                ddp_cost=_solver_cost(self.solver, goal),
                iterations=self.sampler.iterations,
            )
        params = PathCostParams(
            goal=goal,
            q_diag=np.asarray(self.cost.q),
            r_diag=np.asarray(self.cost.r),
            phi_diag=np.asarray(self.cost.phi),
            q_beta=self.cost.q_beta,
            phi_beta=self.cost.phi_beta,
            rfb_diag=None if self.cost.rfb is None else np.asarray(self.cost.rfb),
        )
        sampler = SamplerConfig(
            n_samples=self.sampler.samples,
            horizon=self.episode.planning_horizon,
            lam=self.sampler.lam,
            sigma=np.asarray(self.sampler.sigma),
            alpha=self.sampler.alpha,
            seed=self.episode.seed,
        )
        return EpisodeConfig(
            **common,
            params=params,
            sampler=sampler,
            iterations=self.sampler.iterations,
        )


def _solver_cost(section: SolverSection, goal: np.ndarray) -> QuadraticCost:
    return QuadraticCost.from_diagonals(
        np.asarray(section.q),
        section.q_beta,
        np.asarray(section.r),
        np.asarray(section.phi),
        section.phi_beta,
        goal,
        control_ref=None
        if section.control_ref is None
        else np.asarray(section.control_ref),
    )


def _expect_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return dict(value)


def _leftover(mapping: dict, path: str) -> None:
    if mapping:
        key = sorted(mapping)[0]
        raise ConfigError(f"{path}: unknown key {key!r}")


def _take(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: missing required key")
    return mapping.pop(key)


def _float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    out = float(value)
    if not np.isfinite(out):
        raise ConfigError(f"{path}: must be finite")
    return out


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer")
    return int(value)


def _str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    return value


def _floats(value, path: str, n: int | None = None) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of numbers")
    out = tuple(_float(v, f"{path}[{i}]") for i, v in enumerate(value))
    if n is not None and len(out) != n:
        raise ConfigError(f"{path}: expected {n} entries, got {len(out)}")
    return out


def _box(value, path: str, n: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{path}: expected [lower, upper] bound vectors")
    lo = _floats(value[0], f"{path}[0]", n)
    hi = _floats(value[1], f"{path}[1]", n)
    if any(a > b for a, b in zip(lo, hi)):
        raise ConfigError(f"{path}: lower bound exceeds upper bound")
    return lo, hi


def _model_section(raw, path: str) -> ModelSection:
    d = _expect_mapping(raw, path)
    kind = _str(_take(d, "kind", path), f"{path}.kind")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"{path}.kind: unknown model {kind!r}")
    dt = _float(_take(d, "dt", path), f"{path}.dt")
    if dt <= 0:
        raise ConfigError(f"{path}.dt: must be positive")
    _leftover(d, path)
    return ModelSection(kind=kind, dt=dt)


def _field_section(raw, path: str, pos_dim: int) -> FieldSection:
    d = _expect_mapping(raw, path)
    rv = _float(_take(d, "vehicle_radius", path), f"{path}.vehicle_radius")
    if rv < 0:
        raise ConfigError(f"{path}.vehicle_radius: must be nonnegative")
    obstacles = _take(d, "obstacles", path)
    if obstacles is None:
        obstacles = []
    if not isinstance(obstacles, (list, tuple)):
        raise ConfigError(f"{path}.obstacles: expected a list")
    specs = []
    for i, entry in enumerate(obstacles):
        sub = _expect_mapping(entry, f"{path}.obstacles[{i}]")
        center = _floats(
            _take(sub, "center", f"{path}.obstacles[{i}]"),
            f"{path}.obstacles[{i}].center",
            pos_dim,
        )
        radius = _float(
            _take(sub, "radius", f"{path}.obstacles[{i}]"),
            f"{path}.obstacles[{i}].radius",
        )
        if radius <= 0:
            raise ConfigError(f"{path}.obstacles[{i}].radius: must be positive")
        _leftover(sub, f"{path}.obstacles[{i}]")
        specs.append(ObstacleSpec(center=center, radius=radius))
    _leftover(d, path)
    return FieldSection(vehicle_radius=rv, obstacles=tuple(specs))


def _barrier_section(raw, path: str) -> BarrierSection:
    d = _expect_mapping(raw, path)
    kind = _str(_take(d, "kind", path), f"{path}.kind")
    if kind not in BARRIER_KINDS:
        raise ConfigError(f"{path}.kind: unknown barrier kind {kind!r}")
    gamma = _float(_take(d, "gamma", path), f"{path}.gamma")
    delta = _float(_take(d, "delta", path), f"{path}.delta")
    _leftover(d, path)
    try:
        BarrierConfig(kind=kind, gamma=gamma, delta=delta)
    except ScmppiError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return BarrierSection(kind=kind, gamma=gamma, delta=delta)


def _episode_section(raw, path: str, state_dim: int, pos_dim: int) -> EpisodeSection:
    d = _expect_mapping(raw, path)
    start = _box(_take(d, "start", path), f"{path}.start", state_dim)
    goal = _box(_take(d, "goal", path), f"{path}.goal", state_dim)
    problem = _int(_take(d, "problem_horizon", path), f"{path}.problem_horizon")
    planning = _int(_take(d, "planning_horizon", path), f"{path}.planning_horizon")
    radius = _float(_take(d, "completion_radius", path), f"{path}.completion_radius")
    seed = _int(_take(d, "seed", path), f"{path}.seed")
    episodes = _int(_take(d, "episodes", path), f"{path}.episodes")
    domain = d.pop("domain", None)
    if domain is not None:
        domain = _box(domain, f"{path}.domain", pos_dim)
        if any(a >= b for a, b in zip(domain[0], domain[1])):
            raise ConfigError(f"{path}.domain: bounds must have positive extent")
    _leftover(d, path)
    if problem < 1:
        raise ConfigError(f"{path}.problem_horizon: must be at least 1")
    if not 1 <= planning <= problem:
        raise ConfigError(
            f"{path}.planning_horizon: must lie in [1, problem_horizon]"
        )
    if radius <= 0:
        raise ConfigError(f"{path}.completion_radius: must be positive")
    if episodes < 1:
        raise ConfigError(f"{path}.episodes: must be at least 1")
    return EpisodeSection(
        start=start,
        goal=goal,
        problem_horizon=problem,
        planning_horizon=planning,
        completion_radius=radius,
        seed=seed,
        episodes=episodes,
        domain=domain,
    )


def _cost_section(raw, path: str, state_dim: int, control_dim: int) -> CostSection:
    d = _expect_mapping(raw, path)
    q = _floats(_take(d, "q", path), f"{path}.q", state_dim)
    r = _floats(_take(d, "r", path), f"{path}.r", control_dim)
    phi = _floats(_take(d, "phi", path), f"{path}.phi", state_dim)
    q_beta = _float(_take(d, "q_beta", path), f"{path}.q_beta")
    phi_beta = d.pop("phi_beta", 0.0)
    phi_beta = _float(phi_beta, f"{path}.phi_beta")
    rfb = d.pop("rfb", None)
    if rfb is not None:
        rfb = _floats(rfb, f"{path}.rfb", control_dim)
    _leftover(d, path)
    return CostSection(q=q, r=r, phi=phi, q_beta=q_beta, phi_beta=phi_beta, rfb=rfb)


def _sampler_section(raw, path: str, control_dim: int) -> SamplerSection:
    d = _expect_mapping(raw, path)
    samples = _int(_take(d, "samples", path), f"{path}.samples")
    lam = _float(_take(d, "lam", path), f"{path}.lam")
    sigma = _floats(_take(d, "sigma", path), f"{path}.sigma", control_dim)
    alpha = _float(_take(d, "alpha", path), f"{path}.alpha")
    iterations = _int(_take(d, "iterations", path), f"{path}.iterations")
    _leftover(d, path)
    if samples < 1:
        raise ConfigError(f"{path}.samples: must be at least 1")
    if lam <= 0:
        raise ConfigError(f"{path}.lam: must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"{path}.alpha: must lie in [0, 1]")
    if iterations < 1:
        raise ConfigError(f"{path}.iterations: must be at least 1")
    return SamplerSection(
        samples=samples, lam=lam, sigma=sigma, alpha=alpha, iterations=iterations
    )


def _safe_section(raw, path: str, state_dim: int) -> SafeSection:
    d = _expect_mapping(raw, path)
    nu = d.pop("nu", 1.0)
    nu = _float(nu, f"{path}.nu")
    if nu < 0:
        raise ConfigError(f"{path}.nu: must be nonnegative")
    alpha = d.pop("alpha", None)
    if alpha is not None:
        alpha = _float(alpha, f"{path}.alpha")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"{path}.alpha: must lie in [0, 1]")
    q = d.pop("q", None)
    if q is not None:
        q = _floats(q, f"{path}.q", state_dim)
    q_beta = d.pop("q_beta", None)
    if q_beta is not None:
        q_beta = _float(q_beta, f"{path}.q_beta")
    _leftover(d, path)
    return SafeSection(nu=nu, alpha=alpha, q=q, q_beta=q_beta)


def _solver_section(raw, path: str, state_dim: int, control_dim: int) -> SolverSection:
    d = _expect_mapping(raw, path)
    q = _floats(_take(d, "q", path), f"{path}.q", state_dim)
    r = _floats(_take(d, "r", path), f"{path}.r", control_dim)
    phi = _floats(_take(d, "phi", path), f"{path}.phi", state_dim)
    q_beta = _float(_take(d, "q_beta", path), f"{path}.q_beta")
    iterations = _int(_take(d, "iterations", path), f"{path}.iterations")
    phi_beta = d.pop("phi_beta", 0.0)
    phi_beta = _float(phi_beta, f"{path}.phi_beta")
    control_ref = d.pop("control_ref", None)
    if control_ref is not None:
        control_ref = _floats(control_ref, f"{path}.control_ref", control_dim)
    _leftover(d, path)
    if iterations < 0:
        raise ConfigError(f"{path}.iterations: must be nonnegative")
    return SolverSection(
        q=q,
        r=r,
        phi=phi,
        q_beta=q_beta,
        iterations=iterations,
        phi_beta=phi_beta,
        control_ref=control_ref,
    )


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment config.

    Raises:
        ConfigError: on malformed YAML, unknown keys, missing keys, or
            dimension mismatches; the message names the offending key path.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    d = _expect_mapping(raw, "config")
    name = _str(_take(d, "name", "config"), "name")
    model = _model_section(_take(d, "model", "config"), "model")
    probe = make_model(model.kind, dt=model.dt)
    n, m, p = probe.state_dim, probe.control_dim, probe.position_dim
    field = _field_section(_take(d, "field", "config"), "field", p)
    barrier = _barrier_section(_take(d, "barrier", "config"), "barrier")
    episode = _episode_section(_take(d, "episode", "config"), "episode", n, p)
    solver = _solver_section(_take(d, "solver", "config"), "solver", n, m)
    cost = d.pop("cost", None)
    if cost is not None:
        cost = _cost_section(cost, "cost", n, m)
    sampler = d.pop("sampler", None)
    if sampler is not None:
        sampler = _sampler_section(sampler, "sampler", m)
    safe = d.pop("safe", None)
    safe = SafeSection() if safe is None else _safe_section(safe, "safe", n)
    optimizer = d.pop("optimizer", None)
    if optimizer is not None:
        optimizer = _solver_section(optimizer, "optimizer", n, m)
    _leftover(d, "config")
    return ExperimentConfig(
        name=name,
        model=model,
        field=field,
        barrier=barrier,
        episode=episode,
        solver=solver,
        cost=cost,
        sampler=sampler,
        safe=safe,
        optimizer=optimizer,
    )


def _config_dict(cfg: ExperimentConfig) -> dict:
    out: dict = {"name": cfg.name}
    out["model"] = {"kind": cfg.model.kind, "dt": cfg.model.dt}
    out["field"] = {
        "vehicle_radius": cfg.field.vehicle_radius,
        "obstacles": [
            {"center": list(o.center), "radius": o.radius}
            for o in cfg.field.obstacles
        ],
    }
    out["barrier"] = {
        "kind": cfg.barrier.kind,
        "gamma": cfg.barrier.gamma,
        "delta": cfg.barrier.delta,
    }
    ep = cfg.episode
    out["episode"] = {
        "start": [list(ep.start[0]), list(ep.start[1])],
        "goal": [list(ep.goal[0]), list(ep.goal[1])],
        "problem_horizon": ep.problem_horizon,
        "planning_horizon": ep.planning_horizon,
        "completion_radius": ep.completion_radius,
        "seed": ep.seed,
        "episodes": ep.episodes,
    }
    if ep.domain is not None:
        out["episode"]["domain"] = [list(ep.domain[0]), list(ep.domain[1])]
    if cfg.cost is not None:
        c = cfg.cost
        out["cost"] = {
            "q": list(c.q),
            "r": list(c.r),
            "phi": list(c.phi),
            "q_beta": c.q_beta,
            "phi_beta": c.phi_beta,
        }
        if c.rfb is not None:
            out["cost"]["rfb"] = list(c.rfb)
    if cfg.sampler is not None:
        s = cfg.sampler
        out["sampler"] = {
            "samples": s.samples,
            "lam": s.lam,
            "sigma": list(s.sigma),
            "alpha": s.alpha,
            "iterations": s.iterations,
        }
    if cfg.safe != SafeSection():
        sf = cfg.safe
        block: dict = {"nu": sf.nu}
        if sf.alpha is not None:
            block["alpha"] = sf.alpha
        if sf.q is not None:
            block["q"] = list(sf.q)
        if sf.q_beta is not None:
            block["q_beta"] = sf.q_beta
        out["safe"] = block
    for key, section in (("solver", cfg.solver), ("optimizer", cfg.optimizer)):
        if section is None:
            continue
        block = {
            "q": list(section.q),
            "r": list(section.r),
            "phi": list(section.phi),
            "q_beta": section.q_beta,
            "phi_beta": section.phi_beta,
            "iterations": section.iterations,
        }
        if section.control_ref is not None:
            block["control_ref"] = list(section.control_ref)
        out[key] = block
    return out


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render a config back to YAML; parse(serialize(cfg)) == cfg."""
    return yaml.safe_dump(
        _config_dict(cfg), sort_keys=False, default_flow_style=None
    )


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable sha256 over the canonical JSON form of the config."""
    canon = json.dumps(_config_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def list_presets() -> list[str]:
    """Names of the bundled experiment presets."""
    root = importlib.resources.files(PRESET_PACKAGE)
    return sorted(
        entry.name[: -len(".yaml")]
        for entry in root.iterdir()
        if entry.name.endswith(".yaml")
    )


def load_preset(name: str) -> ExperimentConfig:
    """Parse a bundled preset by name; see ``list_presets``."""
    root = importlib.resources.files(PRESET_PACKAGE)
    res = root / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(list_presets())}"
        )
    return parse_config(res.read_text())
