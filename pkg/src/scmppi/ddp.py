"""Differential dynamic programming on the barrier-embedded model.

The backward pass runs on the embedded state [x, beta] with the value
function expanded in partitioned form (V_x, V_beta, V_xx, V_xbeta, V_bbeta).
Its product is a time-varying affine policy

    u_k = u_ref_k + k_ff_k + K_x,k (x - x_ref_k) + K_bas,k (beta - beta_ref_k)

whose barrier-gain slice K_bas is what the safety-controlled sampler
consumes. Dynamics Jacobians come from central finite differences of the
embedded step; the barrier is evaluated in relaxed form so unsafe reference
trajectories stay admissible. Gauss-Newton only: no second-order dynamics
tensors.

Regularization: each backward pass first runs unregularized; if any Q_uu
fails its Cholesky test the pass restarts with Levenberg-Marquardt shifts
starting at 1e-6 and growing tenfold up to 1e6, beyond which the solve
fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .barriers import BarrierConfig, ObstacleField, embedded_rollout, embedded_step_batch
from .errors import InvalidStateError, SolverFailureError, UnsafeEvaluationError
from .models import Model, clamp_controls

FD_STEP = 1e-6
REG_INIT = 1e-6
REG_GROWTH = 10.0
REG_CAP = 1e6
LINE_SEARCH_ALPHAS = tuple(0.5**i for i in range(7))  # 1 .. 1/64
CONVERGENCE_RTOL = 1e-6


@dataclass(frozen=True)
class QuadraticCost:
    """Quadratic cost about a goal: stage (x̄-ḡ)ᵀQ(x̄-ḡ) + ũᵀRũ, terminal Φ.

    Q and Phi act on the embedded state (the barrier weight q_beta sits on
    their last diagonal entry); the goal's barrier component is 0. The
    control deviation ũ is measured about ``control_ref`` (a trim input such
    as hover thrust), which defaults to zero.
    """

    Q: np.ndarray
    R: np.ndarray
    Phi: np.ndarray
    goal: np.ndarray
    control_ref: np.ndarray | None = None

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        Phi = np.asarray(self.Phi, dtype=float)
        goal = np.asarray(self.goal, dtype=float)
        nbar = goal.shape[0] + 1
        if Q.shape != (nbar, nbar) or Phi.shape != (nbar, nbar):
            raise InvalidStateError("Q and Phi must be (n+1, n+1) embedded matrices")
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise InvalidStateError("R must be square")
        for name, mat in (("Q", Q), ("R", R), ("Phi", Phi)):
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise InvalidStateError(f"{name} must be symmetric")
        ref = self.control_ref
        ref = np.zeros(R.shape[0]) if ref is None else np.asarray(ref, dtype=float)
        if ref.shape != (R.shape[0],):
            raise InvalidStateError("control_ref must match the control dimension")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "control_ref", ref)

    @staticmethod
    def from_diagonals(
        q_diag, q_beta, r_diag, phi_diag, phi_beta, goal, control_ref=None
    ) -> "QuadraticCost":
        q_diag = np.asarray(q_diag, dtype=float)
        phi_diag = np.asarray(phi_diag, dtype=float)
        return QuadraticCost(
            Q=np.diag(np.append(q_diag, q_beta)),
            R=np.diag(np.asarray(r_diag, dtype=float)),
            Phi=np.diag(np.append(phi_diag, phi_beta)),
            goal=np.asarray(goal, dtype=float),
            control_ref=control_ref,
        )

    def embedded_goal(self) -> np.ndarray:
        return np.append(self.goal, 0.0)

    def stage(self, embedded_states: np.ndarray, controls: np.ndarray) -> float:
        d = embedded_states[:-1] - self.embedded_goal()
        state_part = float(np.sum(d @ self.Q * d))
        du = controls - self.control_ref
        ctrl_part = float(np.sum(du @ self.R * du))
        return state_part + ctrl_part

    def terminal(self, embedded_state: np.ndarray) -> float:
        d = embedded_state - self.embedded_goal()
        return float(d @ (self.Phi @ d))

    def total(self, embedded_states: np.ndarray, controls: np.ndarray) -> float:
        return self.stage(embedded_states, controls) + self.terminal(embedded_states[-1])


@dataclass
class ValueExpansion:
    """Partitioned quadratic value expansion at one timestep."""

    V: float
    V_x: np.ndarray
    V_beta: float
    V_xx: np.ndarray
    V_xbeta: np.ndarray
    V_bbeta: float


@dataclass
class QExpansion:
    """Partitioned state-action expansion at one timestep."""

    Q_x: np.ndarray
    Q_beta: float
    Q_u: np.ndarray
    Q_xx: np.ndarray
    Q_bbeta: float
    Q_xbeta: np.ndarray
    Q_uu: np.ndarray
    Q_xu: np.ndarray
    Q_betau: np.ndarray


@dataclass(frozen=True)
class Jacobians:
    """Embedded-step Jacobians at one (state, control) point."""

    F_x: np.ndarray       # (n, n)
    F_u: np.ndarray       # (n, m)
    F_x_beta: np.ndarray  # (n,)  gradient of beta' w.r.t. x
    F_u_beta: np.ndarray  # (m,)  gradient of beta' w.r.t. u
    F_b_beta: float       # d beta' / d beta, analytically -gamma


@dataclass
class FeedbackPolicy:
    """Affine time-varying policy around an embedded reference trajectory."""

    k_ff: np.ndarray        # (T, m)
    K_x: np.ndarray         # (T, m, n)
    K_bas: np.ndarray       # (T, m)
    ref_states: np.ndarray  # (T+1, n+1)
    ref_controls: np.ndarray  # (T, m)
    expected_improvement: float = 0.0

    @property
    def horizon(self) -> int:
        return self.ref_controls.shape[0]

    @staticmethod
    def identity(ref_states: np.ndarray, ref_controls: np.ndarray) -> "FeedbackPolicy":
        """Zero-gain policy that reproduces its reference exactly."""
        horizon, m = ref_controls.shape
        n = ref_states.shape[1] - 1
        return FeedbackPolicy(
            k_ff=np.zeros((horizon, m)),
            K_x=np.zeros((horizon, m, n)),
            K_bas=np.zeros((horizon, m)),
            ref_states=np.array(ref_states, dtype=float),
            ref_controls=np.array(ref_controls, dtype=float),
        )


def jacobians_along(
    states: np.ndarray,
    controls: np.ndarray,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    fd_step: float = FD_STEP,
) -> list[Jacobians]:
    """Central-difference Jacobians at every point of a reference trajectory.

    One batched embedded step evaluates all 2·T·(n+1+m) perturbations.
    """
    horizon = controls.shape[0]
    nbar = states.shape[1]
    n = nbar - 1
    m = controls.shape[1]
    dims = nbar + m

    base = np.concatenate([states[:horizon], controls], axis=1)  # (T, dims)
    steps = fd_step * np.maximum(1.0, np.abs(base))

    pts = np.repeat(base[:, None, :], dims, axis=1)  # (T, dims, dims)
    eye = np.eye(dims)
    plus = pts + steps[:, :, None] * eye[None, :, :]
    minus = pts - steps[:, :, None] * eye[None, :, :]
    both = np.concatenate([plus, minus], axis=0).reshape(-1, dims)

    out = embedded_step_batch(
        both[:, :nbar], both[:, nbar:], model, fld, bcfg, clamp=False
    ).reshape(2, horizon, dims, nbar)
    deriv = (out[0] - out[1]) / (2.0 * steps[:, :, None])  # (T, dims, nbar)

    result = []
    for k in range(horizon):
        d = deriv[k]
        result.append(
            Jacobians(
                F_x=d[:n, :n].T.copy(),
                F_u=d[nbar:, :n].T.copy(),
                F_x_beta=d[:n, n].copy(),
                F_u_beta=d[nbar:, n].copy(),
                F_b_beta=float(d[n, n]),
            )
        )
    return result


def embedded_jacobians(
    embedded_state: np.ndarray,
    control: np.ndarray,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    fd_step: float = FD_STEP,
) -> Jacobians:
    """Jacobians of the embedded step at a single point."""
    states = np.asarray(embedded_state, dtype=float)[None, :]
    controls = np.asarray(control, dtype=float)[None, :]
    states = np.vstack([states, states])  # jacobians_along wants T+1 rows
    return jacobians_along(states, controls, model, fld, bcfg, fd_step)[0]


def stage_derivatives(cost: QuadraticCost, embedded_state: np.ndarray, control: np.ndarray):
    """First/second derivatives of the stage cost, partitioned by (x, beta, u)."""
    d = embedded_state - cost.embedded_goal()
    lbar = 2.0 * (cost.Q @ d)
    hbar = 2.0 * cost.Q
    n = len(d) - 1
    return {
        "L_x": lbar[:n],
        "L_beta": float(lbar[n]),
        "L_u": 2.0 * (cost.R @ (control - cost.control_ref)),
        "L_xx": hbar[:n, :n],
        "L_xbeta": hbar[:n, n],
        "L_bbeta": float(hbar[n, n]),
        "L_uu": 2.0 * cost.R,
    }


def q_expansion(val: ValueExpansion, jac: Jacobians, derivs: dict) -> QExpansion:
    """Assemble the partitioned Q-terms from the next-step value expansion.

    Cross blocks that the shorthand writes as doubled products are assembled
    as A + Aᵀ so the result is an exact quadratic expansion for affine
    dynamics.
    """
    F_x, F_u = jac.F_x, jac.F_u
    f_xb, f_ub, f_bb = jac.F_x_beta, jac.F_u_beta, jac.F_b_beta
    V_x, V_b = val.V_x, val.V_beta
    V_xx, V_xb, V_bb = val.V_xx, val.V_xbeta, val.V_bbeta

    Q_x = F_x.T @ V_x + f_xb * V_b + derivs["L_x"]
    Q_beta = f_bb * V_b + derivs["L_beta"]
    Q_u = F_u.T @ V_x + f_ub * V_b + derivs["L_u"]

    a = np.outer(F_x.T @ V_xb, f_xb)
    Q_xx = F_x.T @ V_xx @ F_x + a + a.T + V_bb * np.outer(f_xb, f_xb) + derivs["L_xx"]

    Q_bbeta = f_bb * V_bb * f_bb + derivs["L_bbeta"]
    Q_xbeta = (F_x.T @ V_xb) * f_bb + f_xb * V_bb * f_bb + derivs["L_xbeta"]

    b = np.outer(F_u.T @ V_xb, f_ub)
    Q_uu = F_u.T @ V_xx @ F_u + b + b.T + V_bb * np.outer(f_ub, f_ub) + derivs["L_uu"]

    Q_xu = (
        F_x.T @ V_xx @ F_u
        + np.outer(F_x.T @ V_xb, f_ub)
        + np.outer(f_xb, V_xb @ F_u)
        + V_bb * np.outer(f_xb, f_ub)
    )
    Q_betau = f_bb * (V_xb @ F_u) + f_bb * V_bb * f_ub

    return QExpansion(
        Q_x=Q_x, Q_beta=float(Q_beta), Q_u=Q_u, Q_xx=Q_xx, Q_bbeta=float(Q_bbeta),
        Q_xbeta=Q_xbeta, Q_uu=Q_uu, Q_xu=Q_xu, Q_betau=Q_betau,
    )


class _NotPositiveDefinite(Exception):
    pass


def optimal_variation(q: QExpansion, reg: float = 0.0):
    """Gains (k_ff, K_x, K_bas) from the regularized Q_uu solve."""
    m = q.Q_u.shape[0]
    quu = 0.5 * (q.Q_uu + q.Q_uu.T) + reg * np.eye(m)
    try:
        np.linalg.cholesky(quu)
    except np.linalg.LinAlgError as exc:
        raise _NotPositiveDefinite(str(exc)) from exc
    rhs = np.concatenate(
        [q.Q_u[:, None], q.Q_xu.T, q.Q_betau[:, None]], axis=1
    )
    sol = -np.linalg.solve(quu, rhs)
    k_ff = sol[:, 0]
    K_x = sol[:, 1:-1]
    K_bas = sol[:, -1]
    return k_ff, K_x, K_bas


def riccati_update(q: QExpansion, gains, value_accum: float = 0.0) -> ValueExpansion:
    """Propagate the value expansion one step back using the given gains."""
    k_ff, K_x, K_bas = gains
    V = value_accum + 0.5 * float(q.Q_u @ k_ff)
    V_x = q.Q_x + q.Q_xu @ k_ff
    V_beta = q.Q_beta + float(q.Q_betau @ k_ff)
    V_xx = q.Q_xx + q.Q_xu @ K_x
    V_xx = 0.5 * (V_xx + V_xx.T)
    V_xbeta = q.Q_xbeta + q.Q_xu @ K_bas
    V_bbeta = q.Q_bbeta + float(q.Q_betau @ K_bas)
    return ValueExpansion(
        V=V, V_x=V_x, V_beta=float(V_beta), V_xx=V_xx,
        V_xbeta=V_xbeta, V_bbeta=float(V_bbeta),
    )


def _terminal_expansion(cost: QuadraticCost, embedded_state: np.ndarray) -> ValueExpansion:
    d = embedded_state - cost.embedded_goal()
    g = 2.0 * (cost.Phi @ d)
    H = 2.0 * cost.Phi
    n = len(d) - 1
    return ValueExpansion(
        V=0.0, V_x=g[:n], V_beta=float(g[n]), V_xx=H[:n, :n],
        V_xbeta=H[:n, n], V_bbeta=float(H[n, n]),
    )


def backward_pass(
    ref_states: np.ndarray,
    ref_controls: np.ndarray,
    cost: QuadraticCost,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    reg: float = 0.0,
    jacs: list[Jacobians] | None = None,
) -> FeedbackPolicy:
    """One backward sweep; raises _NotPositiveDefinite for the reg ladder."""
    horizon, m = ref_controls.shape
    n = ref_states.shape[1] - 1
    if jacs is None:
        jacs = jacobians_along(ref_states, ref_controls, model, fld, bcfg)
    val = _terminal_expansion(cost, ref_states[-1])
    k_ff = np.empty((horizon, m))
    K_x = np.empty((horizon, m, n))
    K_bas = np.empty((horizon, m))
    for k in range(horizon - 1, -1, -1):
        derivs = stage_derivatives(cost, ref_states[k], ref_controls[k])
        q = q_expansion(val, jacs[k], derivs)
        gains = optimal_variation(q, reg)
        k_ff[k], K_x[k], K_bas[k] = gains
        val = riccati_update(q, gains, value_accum=val.V)
    return FeedbackPolicy(
        k_ff=k_ff, K_x=K_x, K_bas=K_bas,
        ref_states=np.array(ref_states, dtype=float),
        ref_controls=np.array(ref_controls, dtype=float),
        expected_improvement=-val.V,
    )


def backward_pass_regularized(
    ref_states, ref_controls, cost, model, fld, bcfg,
) -> FeedbackPolicy:
    """Backward pass with the LM ladder: unregularized first, then 1e-6 x10."""
    jacs = jacobians_along(ref_states, ref_controls, model, fld, bcfg)
    reg = 0.0
    while True:
        try:
            return backward_pass(
                ref_states, ref_controls, cost, model, fld, bcfg, reg=reg, jacs=jacs
            )
        except _NotPositiveDefinite:
            reg = REG_INIT if reg == 0.0 else reg * REG_GROWTH
            if reg > REG_CAP:
                raise SolverFailureError(
                    f"Q_uu not positive definite at regularization cap {REG_CAP:g}"
                ) from None


def rollout_reference(
    embedded_state0: np.ndarray,
    controls: np.ndarray,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
) -> np.ndarray:
    """Embedded rollout of pre-clamped controls (no clamping inside)."""
    return embedded_rollout(embedded_state0, controls, model, fld, bcfg, clamp=False)


def forward_pass(
    policy: FeedbackPolicy,
    embedded_state0: np.ndarray,
    cost: QuadraticCost,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    alphas=LINE_SEARCH_ALPHAS,
):
    """Line-searched policy rollout, all step sizes advanced as one batch.

    Returns (states, controls, cost value, alpha, improved); on no
    improvement the reference itself comes back with improved=False.
    A candidate that drives a strict barrier unsafe is discarded as
    infeasible rather than aborting the search.
    """
    horizon, m = policy.ref_controls.shape
    nbar = policy.ref_states.shape[1]
    n = nbar - 1
    n_ls = len(alphas)
    alpha_col = np.asarray(alphas)[:, None]

    ref_cost = cost.total(policy.ref_states, policy.ref_controls)

    states = np.empty((n_ls, horizon + 1, nbar))
    controls = np.empty((n_ls, horizon, m))
    states[:, 0] = embedded_state0
    infeasible = np.zeros(n_ls, dtype=bool)
    for k in range(horizon):
        dx = states[:, k, :n] - policy.ref_states[k, :n]
        dbeta = states[:, k, n] - policy.ref_states[k, n]
        u = (
            policy.ref_controls[k]
            + alpha_col * policy.k_ff[k]
            + dx @ policy.K_x[k].T
            + dbeta[:, None] * policy.K_bas[k]
        )
        u = clamp_controls(u, model.limits)
        controls[:, k] = u
        active = np.flatnonzero(~infeasible)
        try:
            states[active, k + 1] = embedded_step_batch(
                states[active, k], u[active], model, fld, bcfg, clamp=False
            )
        except UnsafeEvaluationError:
            for i in active:
                try:
                    states[i, k + 1] = embedded_step_batch(
                        states[i : i + 1, k], u[i : i + 1], model, fld, bcfg, clamp=False
                    )[0]
                except UnsafeEvaluationError:
                    infeasible[i] = True
                    states[i, k + 1 :] = states[i, k]
        if infeasible.all():
            break

    costs = np.full(n_ls, np.inf)
    for a in np.flatnonzero(~infeasible):
        costs[a] = cost.total(states[a], controls[a])
    costs[~np.isfinite(costs)] = np.inf
    best = int(np.argmin(costs))
    if costs[best] < ref_cost:
        return states[best], controls[best], float(costs[best]), float(alphas[best]), True
    return policy.ref_states, policy.ref_controls, float(ref_cost), 0.0, False


def solve(
    embedded_state0: np.ndarray,
    initial_controls: np.ndarray,
    cost: QuadraticCost,
    model: Model,
    fld: ObstacleField,
    bcfg: BarrierConfig,
    max_iters: int,
    tol: float = CONVERGENCE_RTOL,
):
    """Iterate backward/forward passes from an initial control sequence.

    Returns ``(policy, info)`` where the policy's reference is the final
    (improved) trajectory and its gains come from one extra backward pass on
    that reference, so K_bas is aligned with the returned sequence. ``info``
    carries iterations used, convergence flag, and the cost trace.
    """
    if max_iters < 1:
        raise InvalidStateError("max_iters must be at least 1")
    controls = clamp_controls(np.array(initial_controls, dtype=float), model.limits)
    states = rollout_reference(embedded_state0, controls, model, fld, bcfg)
    trace = [cost.total(states, controls)]
    converged = False
    for _ in range(max_iters):
        policy = backward_pass_regularized(states, controls, cost, model, fld, bcfg)
        states, controls, new_cost, alpha, improved = forward_pass(
            policy, embedded_state0, cost, model, fld, bcfg
        )
        trace.append(new_cost)
        if not improved:
            converged = True
            break
        if abs(trace[-2] - new_cost) < tol * max(1.0, abs(trace[-2])):
            converged = True
            break
    final_policy = backward_pass_regularized(states, controls, cost, model, fld, bcfg)
    info = {
        "iterations": len(trace) - 1,
        "converged": converged,
        "cost": trace[-1],
        "trace": trace,
    }
    return final_policy, info
