# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rollout kernel. Must match kernels.reference semantics exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, cos, isfinite, sin, sqrt

cnp.import_array()

NAME = "cython"

cdef enum:
    _DUBINS = 0
    _MULTIROTOR = 1

KIND_DUBINS = _DUBINS
KIND_MULTIROTOR = _MULTIROTOR

DEF MAX_STATE = 16
DEF MAX_CTRL = 8


cdef inline double _relaxed(double h, double delta) noexcept nogil:
    if h >= delta:
        return 1.0 / h
    return (2.0 * delta - h) / (delta * delta)


cdef inline void _step(
    int kind, double* prm, double* x, double* u, double* xn
) noexcept nogil:
    cdef double dt = prm[0]
    cdef double mass, g, az, ex, ey, ez
    cdef double qw, qx, qy, qz, p, q, r, qn
    cdef double d0, d1, d2, d3
    if kind == _DUBINS:
        xn[0] = x[0] + dt * u[0] * cos(x[2])
        xn[1] = x[1] + dt * u[0] * sin(x[2])
        xn[2] = x[2] + dt * u[1]
        return
    mass = prm[1]
    g = prm[2]
    qw = x[6]; qx = x[7]; qy = x[8]; qz = x[9]
    p = x[10]; q = x[11]; r = x[12]
    az = u[3] / mass
    ex = 2.0 * (qx * qz + qw * qy)
    ey = 2.0 * (qy * qz - qw * qx)
    ez = 1.0 - 2.0 * (qx * qx + qy * qy)
    xn[0] = x[0] + dt * x[3]
    xn[1] = x[1] + dt * x[4]
    xn[2] = x[2] + dt * x[5]
    xn[3] = x[3] + dt * (ex * az)
    xn[4] = x[4] + dt * (ey * az)
    xn[5] = x[5] + dt * (ez * az - g)
    d0 = 0.5 * (-qx * p - qy * q - qz * r)
    d1 = 0.5 * (qw * p - qz * q + qy * r)
    d2 = 0.5 * (qz * p + qw * q - qx * r)
    d3 = 0.5 * (-qy * p + qx * q + qw * r)
    qw = qw + dt * d0
    qx = qx + dt * d1
    qy = qy + dt * d2
    qz = qz + dt * d3
    qn = sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    xn[6] = qw / qn
    xn[7] = qx / qn
    xn[8] = qy / qn
    xn[9] = qz / qn
    xn[10] = x[10] + dt * (u[0] - x[10]) / prm[3]
    xn[11] = x[11] + dt * (u[1] - x[11]) / prm[4]
    xn[12] = x[12] + dt * (u[2] - x[12]) / prm[5]


def embedded_step_batch(
    int model_kind,
    double[::1] params,
    double[:, ::1] states,
    double[:, ::1] controls,
    double[::1] betas,
    double[:, ::1] obstacles,
    int pos_dim,
    double gamma,
    double delta,
):
    """Advance [x, beta] rows one step under the relaxed barrier recursion."""
    cdef Py_ssize_t batch = states.shape[0]
    cdef Py_ssize_t n = states.shape[1]
    cdef Py_ssize_t m = controls.shape[1]
    cdef Py_ssize_t n_c = obstacles.shape[0]

    out_arr = np.empty((batch, n + 1))
    cdef double[:, ::1] out = out_arr
    cdef double x[MAX_STATE]
    cdef double xn[MAX_STATE]
    cdef double u[MAX_CTRL]
    cdef double bsum, bnext, h, diff
    cdef Py_ssize_t i, j, c, d
    cdef double* prm = &params[0]

    for i in range(batch):
        for j in range(n):
            x[j] = states[i, j]
        for j in range(m):
            u[j] = controls[i, j]
        bsum = 0.0
        for c in range(n_c):
            h = -obstacles[c, 6]
            for d in range(pos_dim):
                diff = x[d] - obstacles[c, d]
                h += obstacles[c, 3 + d] * diff * diff
            bsum += _relaxed(h, delta)
        _step(model_kind, prm, x, u, xn)
        bnext = 0.0
        for c in range(n_c):
            h = -obstacles[c, 6]
            for d in range(pos_dim):
                diff = xn[d] - obstacles[c, d]
                h += obstacles[c, 3 + d] * diff * diff
            bnext += _relaxed(h, delta)
        for j in range(n):
            out[i, j] = xn[j]
        out[i, n] = bnext - gamma * (betas[i] - bsum)
    return out_arr


def rollout_batch(
    int model_kind,
    double[::1] params,
    double[::1] lo,
    double[::1] hi,
    double[::1] x0,
    double beta0,
    double[:, ::1] nominal,
    double[:, :, ::1] noise,
    double[:, ::1] gains,
    double nu,
    double[:, ::1] obstacles,
    int pos_dim,
    double gamma,
    double delta,
    double[::1] goal,
    double[::1] q_diag,
    double q_beta,
    double[::1] phi_diag,
    double phi_beta,
    double[::1] r_diag,
    double[::1] rfb_diag,
    double[::1] sigma_inv_diag,
    double lam,
    double alpha,
    double cap,
    int keep=0,
):
    cdef Py_ssize_t n_samples = noise.shape[0]
    cdef Py_ssize_t horizon = noise.shape[1]
    cdef Py_ssize_t m = noise.shape[2]
    cdef Py_ssize_t n = x0.shape[0]
    cdef Py_ssize_t n_c = obstacles.shape[0]

    costs_arr = np.zeros(n_samples)
    min_h_arr = np.full(n_samples, np.inf)
    viol_arr = np.full(n_samples, -1, dtype=np.int64)
    kfb_abs_arr = np.zeros(horizon)
    kept_arr = np.empty((keep, horizon + 1, n + 1)) if keep else None

    cdef double[::1] costs = costs_arr
    cdef double[::1] min_h = min_h_arr
    cdef long long[::1] viol = viol_arr
    cdef double[::1] kfb_abs = kfb_abs_arr
    cdef double[:, :, ::1] kept
    if keep:
        kept = kept_arr

    cdef double r_sig[MAX_CTRL]
    cdef double rfb_sig[MAX_CTRL]
    cdef double x[MAX_STATE]
    cdef double xn[MAX_STATE]
    cdef double ueff[MAX_CTRL]
    cdef double smooth = 0.5 * lam * (1.0 - alpha)
    cdef double beta, cost, mh, fbpen, bsum, bnext
    cdef double dxj, ctrl, kfb_j, h, hmin_k, diff, u
    cdef Py_ssize_t i, k, j, c, d
    cdef long long fv
    cdef double* prm = &params[0]

    for j in range(m):
        r_sig[j] = r_diag[j] * sigma_inv_diag[j]
        rfb_sig[j] = rfb_diag[j] * sigma_inv_diag[j]

    for i in range(n_samples):
        for j in range(n):
            x[j] = x0[j]
        beta = beta0
        cost = 0.0
        mh = INFINITY
        fv = -1
        fbpen = 0.0
        bsum = 0.0
        for c in range(n_c):
            h = -obstacles[c, 6]
            for d in range(pos_dim):
                diff = x[d] - obstacles[c, d]
                h += obstacles[c, 3 + d] * diff * diff
            bsum += _relaxed(h, delta)
        if keep and i < keep:
            for j in range(n):
                kept[i, 0, j] = x[j]
            kept[i, 0, n] = beta

        for k in range(horizon):
            if k > 0:
                for j in range(n):
                    dxj = x[j] - goal[j]
                    cost += q_diag[j] * dxj * dxj
                cost += q_beta * beta * beta
                ctrl = 0.0
                for j in range(m):
                    ctrl += (nominal[k, j] + 2.0 * noise[i, k, j]) * r_sig[j] * nominal[k, j]
                cost += smooth * (fbpen + ctrl)
            fbpen = 0.0
            for j in range(m):
                kfb_j = nu * beta * gains[k, j]
                kfb_abs[k] += kfb_j if kfb_j >= 0.0 else -kfb_j
                fbpen += kfb_j * rfb_sig[j] * kfb_j
                u = nominal[k, j] + noise[i, k, j] + kfb_j
                if u < lo[j]:
                    u = lo[j]
                if u > hi[j]:
                    u = hi[j]
                ueff[j] = u
            _step(model_kind, prm, x, ueff, xn)
            for j in range(n):
                x[j] = xn[j]
            if n_c:
                bnext = 0.0
                hmin_k = INFINITY
                for c in range(n_c):
                    h = -obstacles[c, 6]
                    for d in range(pos_dim):
                        diff = x[d] - obstacles[c, d]
                        h += obstacles[c, 3 + d] * diff * diff
                    if h < hmin_k:
                        hmin_k = h
                    bnext += _relaxed(h, delta)
                if hmin_k < mh:
                    mh = hmin_k
                if hmin_k <= 0.0 and fv < 0:
                    fv = k + 1
            else:
                bnext = bsum
            beta = bnext - gamma * (beta - bsum)
            bsum = bnext
            if keep and i < keep:
                for j in range(n):
                    kept[i, k + 1, j] = x[j]
                kept[i, k + 1, n] = beta

        for j in range(n):
            dxj = x[j] - goal[j]
            cost += phi_diag[j] * dxj * dxj
        cost += phi_beta * beta * beta
        if fv >= 0 or not isfinite(cost):
            cost = cap
        costs[i] = cost
        min_h[i] = mh
        viol[i] = fv

    for k in range(horizon):
        kfb_abs[k] /= n_samples * m

    return costs_arr, min_h_arr, viol_arr, kfb_abs_arr, kept_arr
