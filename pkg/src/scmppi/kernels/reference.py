"""Pure-numpy rollout kernel: the reference the compiled core must match.

Both backends expose ``rollout_batch`` with identical array-level semantics.
All model/constraint/cost data arrives as plain float arrays so the compiled
mirror needs no Python objects.

Per-sample semantics (one trajectory of horizon T from shared ``x0``):

* at step k the effective control is ``nominal[k] + noise[i, k] + k_fb``
  with ``k_fb = nu * beta_k * gains[k]``; the result is clamped to the box.
* the running cost at k > 0 adds the state cost of the current state, the
  feedback penalty of the k_fb applied on the previous transition, and the
  control smoothing term ``(u_k + 2 eps_k)^T R Sigma^-1 u_k``, all scaled by
  ``lambda (1 - alpha) / 2`` except the state cost.
* the barrier state follows the relaxed-barrier recursion
  ``beta' = sum B(h(x')) - gamma (beta - sum B(h(x)))`` so arithmetic stays
  finite on unsafe iterates.
* after the loop the terminal cost is added; samples whose visited states
  (k = 1..T, the shared initial state is excluded) ever had a margin <= 0,
  and samples with non-finite cost, get cost exactly ``cap``.

Returned ``min_h`` is the minimum constraint margin over k = 1..T (+inf when
the field is empty), ``first_violation`` is the first violating state index
(k, 1-based over visited states) or -1 for safe samples, and ``kfb_abs`` is
the per-step mean |k_fb| over samples and channels.
"""

from __future__ import annotations

import numpy as np

from ..models import ModelParams, dubins_step_batch, multirotor_step_batch

NAME = "reference"

KIND_DUBINS = 0
KIND_MULTIROTOR = 1


def _margins(states: np.ndarray, obstacles: np.ndarray, pos_dim: int) -> np.ndarray:
    """Packed-row margins h for states (B, n) -> (B, n_c)."""
    pos = states[:, :pos_dim]
    diff = pos[:, None, :] - obstacles[None, :, 0:pos_dim]
    scale = obstacles[None, :, 3:3 + pos_dim]
    return np.sum(scale * diff * diff, axis=2) - obstacles[None, :, 6]


def _relaxed_sum(h: np.ndarray, delta: float) -> np.ndarray:
    """Sum over constraints of the relaxed barrier, (B, n_c) -> (B,)."""
    out = np.where(h >= delta, 1.0 / np.maximum(h, delta), (2.0 * delta - h) / (delta * delta))
    return np.sum(out, axis=1)


def rollout_batch(
    model_kind: int,
    params: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    x0: np.ndarray,
    beta0: float,
    nominal: np.ndarray,
    noise: np.ndarray,
    gains: np.ndarray,
    nu: float,
    obstacles: np.ndarray,
    pos_dim: int,
    gamma: float,
    delta: float,
    goal: np.ndarray,
    q_diag: np.ndarray,
    q_beta: float,
    phi_diag: np.ndarray,
    phi_beta: float,
    r_diag: np.ndarray,
    rfb_diag: np.ndarray,
    sigma_inv_diag: np.ndarray,
    lam: float,
    alpha: float,
    cap: float,
    keep: int = 0,
):
    n_samples, horizon, m = noise.shape
    n = x0.shape[0]
    n_c = obstacles.shape[0]

    if model_kind == KIND_DUBINS:
        dt = params[0]
        step = lambda X, U: dubins_step_batch(X, U, dt)
    else:
        mp = ModelParams(
            dt=params[0], mass=params[1], gravity=params[2],
            rate_lag=(params[3], params[4], params[5]),
        )
        step = lambda X, U: multirotor_step_batch(X, U, mp)

    r_sig = r_diag * sigma_inv_diag
    rfb_sig = rfb_diag * sigma_inv_diag
    smooth = 0.5 * lam * (1.0 - alpha)

    X = np.tile(x0, (n_samples, 1))
    beta = np.full(n_samples, float(beta0))
    cost = np.zeros(n_samples)
    min_h = np.full(n_samples, np.inf)
    first_violation = np.full(n_samples, -1, dtype=np.int64)
    kfb_abs = np.zeros(horizon)
    fb_penalty = np.zeros(n_samples)  # k_fb term of the transition just applied

    kept = np.empty((keep, horizon + 1, n + 1)) if keep else None
    if keep:
        kept[:, 0, :n] = X[:keep]
        kept[:, 0, n] = beta[:keep]

    if n_c:
        bsum = _relaxed_sum(_margins(X, obstacles, pos_dim), delta)
    else:
        bsum = np.zeros(n_samples)

    for k in range(horizon):
        if k > 0:
            dx = X - goal
            cost += np.einsum("ij,j,ij->i", dx, q_diag, dx) + q_beta * beta * beta
            u_k = nominal[k]
            eps = noise[:, k, :]
            ctrl = np.einsum("im,m->i", u_k + 2.0 * eps, r_sig * u_k)
            cost += smooth * (fb_penalty + ctrl)
        k_fb = (nu * beta)[:, None] * gains[k][None, :]
        kfb_abs[k] = np.sum(np.abs(k_fb)) / (n_samples * m)
        fb_penalty = np.einsum("im,m,im->i", k_fb, rfb_sig, k_fb)
        u_eff = np.clip(nominal[k] + noise[:, k, :] + k_fb, lo, hi)
        X = step(X, u_eff)
        if n_c:
            h = _margins(X, obstacles, pos_dim)
            h_min = np.min(h, axis=1)
            np.minimum(min_h, h_min, out=min_h)
            newly = (h_min <= 0.0) & (first_violation < 0)
            first_violation[newly] = k + 1
            bsum_next = _relaxed_sum(h, delta)
        else:
            bsum_next = bsum
        beta = bsum_next - gamma * (beta - bsum)
        bsum = bsum_next
        if keep:
            kept[:, k + 1, :n] = X[:keep]
            kept[:, k + 1, n] = beta[:keep]

    dx = X - goal
    cost += np.einsum("ij,j,ij->i", dx, phi_diag, dx) + phi_beta * beta * beta

    capped = (first_violation >= 0) | ~np.isfinite(cost)
    cost[capped] = cap
    return cost, min_h, first_violation, kfb_abs, kept
