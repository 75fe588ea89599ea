"""Compiled right-hand side and Dormand-Prince 5(4) stepper.

Everything here works on flat float64 arrays so numba can compile it. The
public, dataclass-based API lives in :mod:`drumctl.reactor`.

State vector layout (``N_STATE`` entries)::

    0      n_bar
    1..6   c_bar[0..5]
    7      T_f
    8      T_m
    9      T_c
    10     conc_I
    11     conc_X
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

N_STATE = 12
N_GROUPS = 6
IDX_N = 0
IDX_C = 1
IDX_TF = 7
IDX_TM = 8
IDX_TC = 9
IDX_I = 10
IDX_X = 11

# packed parameter vector, see ReactorParams.packed()
P_BETA = 0  # 6 entries, absolute
P_LAMBDA = 6  # 6 entries
P_GEN_TIME = 12
P_ALPHA_F = 13  # absolute / K
P_ALPHA_M = 14
P_ALPHA_C = 15
P_MCF = 16  # m_f * c_f
P_MCM = 17
P_MCC = 18
P_KFM = 19
P_KMC = 20
P_MDOT_CC = 21  # mdot_c * c_c
P_T_IN = 22
P_POWER = 23
P_Q = 24
P_FISSION_RATE = 25  # Sigma_f * v * n_0 at n_bar = 1
P_GAMMA_I = 26
P_GAMMA_X = 27
P_LAMBDA_I = 28
P_LAMBDA_X = 29
P_BURNUP_RATE = 30  # sigma_X * v * n_0 at n_bar = 1
P_XE_WORTH = 31  # sigma_X * v * scale, absolute reactivity per unit conc_X
P_DRUM_HALF_WORTH = 32  # per-drum (rho_max / 2), absolute
N_PACKED = 33

# reference vector: theta_ref[8], T_f, T_m, T_c, X, external reactivity
R_TF = 8
R_TM = 9
R_TC = 10
R_X = 11
R_EXT = 12
N_REF = 13

DEG = math.pi / 180.0

# Dormand-Prince 5(4) tableau
A21 = 1.0 / 5.0
A31, A32 = 3.0 / 40.0, 9.0 / 40.0
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
B1, B3, B4, B5, B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
C2, C3, C4, C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
# 5th-order minus embedded 4th-order weights
E1 = 71.0 / 57600.0
E3 = -71.0 / 16695.0
E4 = 71.0 / 1920.0
E5 = -17253.0 / 339200.0
E6 = 22.0 / 525.0
E7 = -1.0 / 40.0


@njit(cache=True)
def drum_angle(theta0, speed, tau):
    a = theta0 + speed * tau
    if a < 0.0:
        return 0.0
    if a > 180.0:
        return 180.0
    return a


@njit(cache=True)
def drum_reactivity(theta0, speed, tau, ref, p):
    """Summed per-drum worth change relative to the reference angles (absolute)."""
    total = 0.0
    for i in range(theta0.shape[0]):
        th = drum_angle(theta0[i], speed[i], tau)
        total += math.cos(ref[i] * DEG) - math.cos(th * DEG)
    return p[P_DRUM_HALF_WORTH] * total


@njit(cache=True)
def reactivity(y, theta0, speed, tau, ref, p):
    rho = drum_reactivity(theta0, speed, tau, ref, p)
    rho += p[P_ALPHA_F] * (y[IDX_TF] - ref[R_TF])
    rho += p[P_ALPHA_M] * (y[IDX_TM] - ref[R_TM])
    rho += p[P_ALPHA_C] * (y[IDX_TC] - ref[R_TC])
    rho -= p[P_XE_WORTH] * (y[IDX_X] - ref[R_X])
    return rho + ref[R_EXT]


@njit(cache=True)
def rhs(tau, y, theta0, speed, ref, p, out):
    n = y[IDX_N]
    rho = reactivity(y, theta0, speed, tau, ref, p)
    gen = p[P_GEN_TIME]
    beta = 0.0
    delayed = 0.0
    for g in range(N_GROUPS):
        b = p[P_BETA + g]
        beta += b
        delayed += b * y[IDX_C + g]
        out[IDX_C + g] = p[P_LAMBDA + g] * (n - y[IDX_C + g])
    out[IDX_N] = ((rho - beta) * n + delayed) / gen

    power = p[P_POWER] * n
    q = p[P_Q]
    fm = p[P_KFM] * (y[IDX_TF] - y[IDX_TM])
    mc = p[P_KMC] * (y[IDX_TM] - y[IDX_TC])
    out[IDX_TF] = (q * power - fm) / p[P_MCF]
    out[IDX_TM] = ((1.0 - q) * power + fm - mc) / p[P_MCM]
    out[IDX_TC] = (mc - p[P_MDOT_CC] * (y[IDX_TC] - p[P_T_IN])) / p[P_MCC]

    fission = p[P_FISSION_RATE] * n
    iodine = y[IDX_I]
    xenon = y[IDX_X]
    out[IDX_I] = p[P_GAMMA_I] * fission - p[P_LAMBDA_I] * iodine
    out[IDX_X] = (
        p[P_GAMMA_X] * fission
        - p[P_LAMBDA_X] * xenon
        + p[P_LAMBDA_I] * iodine
        - p[P_BURNUP_RATE] * n * xenon
    )


@njit(cache=True)
def _error_norm(err, y0, y1, rtol, atol):
    acc = 0.0
    for i in range(err.shape[0]):
        sc = atol + rtol * max(abs(y0[i]), abs(y1[i]))
        acc += (err[i] / sc) ** 2
    return math.sqrt(acc / err.shape[0])


@njit(cache=True)
def _initial_step(t0, t1, y, f0, theta0, speed, ref, p, rtol, atol):
    # Hairer, Norsett & Wanner, "Solving ODEs I", II.4
    n = y.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y[i])
        d0 += (y[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = math.sqrt(d0 / n)
    d1 = math.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, t1 - t0)
    y1 = y + h0 * f0
    f1 = np.empty(n)
    rhs(t0 + h0, y1, theta0, speed, ref, p, f1)
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y[i])
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = math.sqrt(d2 / n) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, t1 - t0)


@njit(cache=True)
def dopri5(t0, t1, y, theta0, speed, ref, p, rtol, atol, max_steps, h_init):
    """Adaptive Dormand-Prince 5(4) from ``t0`` to ``t1``.

    Returns ``(y_end, status, n_steps, h_last)``. ``status`` is 0 on success,
    1 when the step size underflows or the state goes non-finite, and 2 when
    ``max_steps`` is exhausted; on failure ``y_end`` is the last accepted
    state.
    """
    n = y.shape[0]
    y = y.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    k7 = np.empty(n)
    ytmp = np.empty(n)
    ynew = np.empty(n)
    err = np.empty(n)

    t = t0
    rhs(t, y, theta0, speed, ref, p, k1)
    if h_init > 0.0:
        h = min(h_init, t1 - t0)
    else:
        h = _initial_step(t0, t1, y, k1, theta0, speed, ref, p, rtol, atol)
    steps = 0
    rejected_last = False
    while t < t1:
        if steps >= max_steps:
            return y, 2, steps, h
        h_min = 1e-12 * max(1.0, abs(t))
        if h < h_min:
            return y, 1, steps, h
        last = False
        if t + h >= t1:
            h = t1 - t
            last = True

        for i in range(n):
            ytmp[i] = y[i] + h * A21 * k1[i]
        rhs(t + C2 * h, ytmp, theta0, speed, ref, p, k2)
        for i in range(n):
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i])
        rhs(t + C3 * h, ytmp, theta0, speed, ref, p, k3)
        for i in range(n):
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
        rhs(t + C4 * h, ytmp, theta0, speed, ref, p, k4)
        for i in range(n):
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
        rhs(t + C5 * h, ytmp, theta0, speed, ref, p, k5)
        for i in range(n):
            ytmp[i] = y[i] + h * (
                A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]
            )
        t_new = t1 if last else t + h
        rhs(t_new, ytmp, theta0, speed, ref, p, k6)
        for i in range(n):
            ynew[i] = y[i] + h * (
                B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]
            )
        rhs(t_new, ynew, theta0, speed, ref, p, k7)
        for i in range(n):
            err[i] = h * (
                E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]
            )
        en = _error_norm(err, y, ynew, rtol, atol)
        if not math.isfinite(en):
            h *= 0.1
            rejected_last = True
            steps += 1
            continue

        if en <= 1.0:
            t = t_new
            for i in range(n):
                y[i] = ynew[i]
                k1[i] = k7[i]
            fac = 10.0 if en == 0.0 else min(10.0, 0.9 * en ** -0.2)
            if rejected_last:
                fac = min(fac, 1.0)
            if not last:
                h *= max(0.2, fac)
            rejected_last = False
        else:
            h *= max(0.2, 0.9 * en ** -0.2)
            rejected_last = True
        steps += 1
    return y, 0, steps, h


@njit(cache=True)
def dopri5_fixed(t0, t1, y, theta0, speed, ref, p, h):
    """Fixed-step 5th-order Dormand-Prince solution, for convergence-order tests."""
    n = y.shape[0]
    y = y.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    steps = int(round((t1 - t0) / h))
    for s in range(steps):
        t = t0 + s * h
        rhs(t, y, theta0, speed, ref, p, k1)
        rhs(t + C2 * h, y + h * A21 * k1, theta0, speed, ref, p, k2)
        rhs(t + C3 * h, y + h * (A31 * k1 + A32 * k2), theta0, speed, ref, p, k3)
        rhs(t + C4 * h, y + h * (A41 * k1 + A42 * k2 + A43 * k3), theta0, speed, ref, p, k4)
        rhs(
            t + C5 * h,
            y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4),
            theta0, speed, ref, p, k5,
        )
        rhs(
            t + h,
            y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5),
            theta0, speed, ref, p, k6,
        )
        y = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
    return y
