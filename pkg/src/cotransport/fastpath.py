"""Compiled kernels for the planar team model.

The prediction rollouts inside the receding-horizon solver evaluate the
coupled dynamics tens of thousands of times per sampling round; these numba
kernels mirror `coupled.forward_dynamics` for the planar agent exactly (same
formulas, same RK4 stepping) and are equivalence-tested against the reference
implementation. fastmath stays off so results are reproducible bit-for-bit.
All linear algebra is hand-rolled: the 4x4 solves would otherwise be dominated
by LAPACK call overhead.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# parameter vector layout for one agent + its object share
P_BASE_MASS = 0
P_M1 = 1
P_M2 = 2
P_L1 = 3
P_L2 = 4
P_I1 = 5
P_I2 = 6
P_MOUNT_H = 7
P_OFF_X = 8
P_OFF_Y = 9
P_OFF_Z = 10
P_ROLL_OFF = 11
P_SHARE = 12
P_OBJ_MASS = 13
P_OBJ_IXX = 14
P_GRAVITY = 15
PAR_LEN = 16


def pack_params(agent, obj) -> np.ndarray:
    p = agent.params
    out = np.zeros(PAR_LEN)
    out[P_BASE_MASS] = p.base_mass
    out[P_M1], out[P_M2] = p.link_masses
    out[P_L1], out[P_L2] = p.link_lengths
    out[P_I1], out[P_I2] = p.link_inertias
    out[P_MOUNT_H] = p.mount_height
    out[P_OFF_X : P_OFF_Z + 1] = p.grasp_offset
    out[P_ROLL_OFF] = p.grasp_roll_offset
    out[P_SHARE] = p.load_share
    out[P_OBJ_MASS] = obj.mass
    out[P_OBJ_IXX] = obj.inertia[0, 0]
    out[P_GRAVITY] = agent.gravity
    return out


@njit(cache=True, inline="always")
def _solve4(a, rhs):
    """Gaussian elimination with partial pivoting; a (4,4), rhs (4,m). In-place on copies."""
    lu = a.copy()
    x = rhs.copy()
    m = rhs.shape[1]
    for col in range(4):
        piv = col
        best = abs(lu[col, col])
        for r in range(col + 1, 4):
            v = abs(lu[r, col])
            if v > best:
                best = v
                piv = r
        if piv != col:
            for c in range(4):
                tmp = lu[col, c]
                lu[col, c] = lu[piv, c]
                lu[piv, c] = tmp
            for c in range(m):
                tmp = x[col, c]
                x[col, c] = x[piv, c]
                x[piv, c] = tmp
        inv_p = 1.0 / lu[col, col]
        for r in range(col + 1, 4):
            f = lu[r, col] * inv_p
            if f != 0.0:
                for c in range(col + 1, 4):
                    lu[r, c] -= f * lu[col, c]
                for c in range(m):
                    x[r, c] -= f * x[col, c]
    for col in range(3, -1, -1):
        inv_p = 1.0 / lu[col, col]
        for c in range(m):
            acc = x[col, c]
            for r in range(col + 1, 4):
                acc -= lu[col, r] * x[r, c]
            x[col, c] = acc * inv_p
    return x


@njit(cache=True, inline="always")
def _mm4(a, b):
    out = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for k in range(4):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


@njit(cache=True, inline="always")
def _mm4t(a, b):
    """a^T @ b for 4x4."""
    out = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for k in range(4):
                acc += a[k, i] * b[k, j]
            out[i, j] = acc
    return out


@njit(cache=True, inline="always")
def _mv4(a, v):
    out = np.empty(4)
    for i in range(4):
        acc = 0.0
        for k in range(4):
            acc += a[i, k] * v[k]
        out[i] = acc
    return out


@njit(cache=True)
def planar_accel(par, q, qd, u):
    m1 = par[P_M1]
    m2 = par[P_M2]
    l1 = par[P_L1]
    l2 = par[P_L2]
    i1 = par[P_I1]
    i2 = par[P_I2]
    r1 = 0.5 * l1
    r2 = 0.5 * l2
    grav = par[P_GRAVITY]
    share = par[P_SHARE]

    a1 = q[2]
    a12 = q[2] + q[3]
    s1 = np.sin(a1)
    c1 = np.cos(a1)
    s12 = np.sin(a12)
    c12 = np.cos(a12)
    s2 = np.sin(q[3])
    c2 = np.cos(q[3])
    w1 = qd[2]
    w12 = qd[2] + qd[3]

    jac = np.zeros((4, 4))
    jac[0, 0] = 1.0
    jac[1, 1] = 1.0
    jac[1, 2] = -l1 * c1 - l2 * c12
    jac[1, 3] = -l2 * c12
    jac[2, 2] = -l1 * s1 - l2 * s12
    jac[2, 3] = -l2 * s12
    jac[3, 2] = 1.0
    jac[3, 3] = 1.0

    jd = np.zeros((4, 4))
    jd[1, 2] = l1 * s1 * w1 + l2 * s12 * w12
    jd[1, 3] = l2 * s12 * w12
    jd[2, 2] = -l1 * c1 * w1 - l2 * c12 * w12
    jd[2, 3] = -l2 * c12 * w12

    h1 = m1 * r1 + m2 * l1
    h2 = m2 * r2
    ia = m1 * r1 * r1 + i1 + m2 * (l1 * l1 + r2 * r2) + i2
    ib = m2 * r2 * r2 + i2
    m_tot = par[P_BASE_MASS] + m1 + m2

    b = np.zeros((4, 4))
    b[0, 0] = m_tot
    b[1, 1] = m_tot
    b[1, 2] = -h1 * c1 - h2 * c12
    b[2, 1] = b[1, 2]
    b[1, 3] = -h2 * c12
    b[3, 1] = b[1, 3]
    b[2, 2] = ia + 2.0 * m2 * l1 * r2 * c2
    b[2, 3] = ib + m2 * l1 * r2 * c2
    b[3, 2] = b[2, 3]
    b[3, 3] = ib

    # dB/dq slices for q2, q3; N via Christoffel symbols of the first kind
    db2 = np.zeros((4, 4))
    db2[1, 2] = h1 * s1 + h2 * s12
    db2[2, 1] = db2[1, 2]
    db2[1, 3] = h2 * s12
    db2[3, 1] = db2[1, 3]
    db3 = np.zeros((4, 4))
    db3[1, 2] = h2 * s12
    db3[2, 1] = db3[1, 2]
    db3[1, 3] = h2 * s12
    db3[3, 1] = db3[1, 3]
    db3[2, 2] = -2.0 * m2 * l1 * r2 * s2
    db3[2, 3] = -m2 * l1 * r2 * s2
    db3[3, 2] = db3[2, 3]

    n_mat = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            total = 0.0
            for k in range(2, 4):
                dbk = db2 if k == 2 else db3
                term = dbk[i, j]
                if j == 2:
                    term += db2[i, k]
                elif j == 3:
                    term += db3[i, k]
                if i == 2:
                    term -= db2[j, k]
                elif i == 3:
                    term -= db3[j, k]
                total += term * qd[k]
            n_mat[i, j] = 0.5 * total

    g_q = np.zeros(4)
    g_q[2] = -grav * (h1 * s1 + h2 * s12)
    g_q[3] = -grav * h2 * s12

    # B^-1 [J^T | g_q | N] then M_i [J | J B^-1 g_q | J B^-1 N]
    rhs = np.empty((4, 9))
    for i in range(4):
        for j in range(4):
            rhs[i, j] = jac[j, i]
            rhs[i, 5 + j] = n_mat[i, j]
        rhs[i, 4] = g_q[i]
    x_sol = _solve4(b, rhs)

    a_mat = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for k in range(4):
                acc += jac[i, k] * x_sol[k, j]
            a_mat[i, j] = acc

    rhs2 = np.empty((4, 9))
    for i in range(4):
        for j in range(4):
            rhs2[i, j] = jac[i, j]
        for c in range(4, 9):
            acc = 0.0
            for k in range(4):
                acc += jac[i, k] * x_sol[k, c]
            rhs2[i, c] = acc
    y_sol = _solve4(a_mat, rhs2)
    mi_j = np.ascontiguousarray(y_sol[:, :4])
    g_i = np.ascontiguousarray(y_sol[:, 4])
    mi_jbn = np.ascontiguousarray(y_sol[:, 5:])

    ce = np.cos(a12)
    se = np.sin(a12)
    offw1 = ce * par[P_OFF_Y] - se * par[P_OFF_Z]
    offw2 = se * par[P_OFF_Y] + ce * par[P_OFF_Z]
    peo1 = -offw1
    peo2 = -offw2

    j_io = np.eye(4)
    j_io[1, 3] = peo2
    j_io[2, 3] = -peo1
    j_oi = np.eye(4)
    j_oi[1, 3] = -peo2
    j_oi[2, 3] = peo1
    j_iod = np.zeros((4, 4))
    j_iod[1, 3] = w12 * peo1
    j_iod[2, 3] = w12 * peo2

    mo = par[P_OBJ_MASS]
    ixx = par[P_OBJ_IXX]
    m_o = np.zeros((4, 4))
    m_o[0, 0] = mo
    m_o[1, 1] = mo
    m_o[2, 2] = mo
    m_o[3, 3] = ixx

    mt = share * _mm4(m_o, _mm4(j_io, jac))
    mt += _mm4t(j_oi, mi_j)
    ct = _mm4t(j_oi, mi_jbn)
    ct += share * (_mm4(m_o, _mm4(j_io, jd)) + _mm4(m_o, _mm4(j_iod, jac)))
    gt = _mv4(j_oi.T.copy(), g_i)
    gt[2] += share * mo * grav

    rhs3 = np.empty((4, 1))
    ctqd = _mv4(ct, qd)
    jotu = _mv4(j_oi.T.copy(), u)
    for i in range(4):
        rhs3[i, 0] = jotu[i] - ctqd[i] - gt[i]
    return _solve4(mt, rhs3)[:, 0]


@njit(cache=True)
def _rk4_step(par, x, u, dt):
    q = x[:4]
    qd = x[4:]
    k1 = np.empty(8)
    k1[:4] = qd
    k1[4:] = planar_accel(par, q, qd, u)
    x2 = x + 0.5 * dt * k1
    k2 = np.empty(8)
    k2[:4] = x2[4:]
    k2[4:] = planar_accel(par, x2[:4], x2[4:], u)
    x3 = x + 0.5 * dt * k2
    k3 = np.empty(8)
    k3[:4] = x3[4:]
    k3[4:] = planar_accel(par, x3[:4], x3[4:], u)
    x4 = x + dt * k3
    k4 = np.empty(8)
    k4[:4] = x4[4:]
    k4[4:] = planar_accel(par, x4[:4], x4[4:], u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def rollout(par, x0, u_seq, h, n_sub):
    """Predict node and interval-midpoint states under piecewise-constant u.

    Returns (nodes (K+1, 8), mids (K, 8)); n_sub RK4 sub-steps per interval
    (even, so the midpoint lands on a sub-step boundary).
    """
    k_int = u_seq.shape[0]
    nodes = np.empty((k_int + 1, 8))
    mids = np.empty((k_int, 8))
    nodes[0] = x0
    x = x0.copy()
    dt = h / n_sub
    half = n_sub // 2
    for k in range(k_int):
        u = u_seq[k]
        for s in range(n_sub):
            x = _rk4_step(par, x, u, dt)
            if s + 1 == half:
                mids[k] = x
        nodes[k + 1] = x
    return nodes, mids


@njit(cache=True)
def plant_step(par, x, u, h, n_sub):
    """One plant step of length h under constant u; returns all sub-step states.

    Output row 0 is the initial state, row n_sub the state at t + h.
    """
    out = np.empty((n_sub + 1, 8))
    out[0] = x
    dt = h / n_sub
    cur = x.copy()
    for s in range(n_sub):
        cur = _rk4_step(par, cur, u, dt)
        out[s + 1] = cur
    return out


@njit(cache=True)
def rollout_batch(par, x0, u_batch, h, n_sub):
    """rollout() over a batch of control sequences (B, K, m)."""
    b = u_batch.shape[0]
    k_int = u_batch.shape[1]
    nodes = np.empty((b, k_int + 1, 8))
    mids = np.empty((b, k_int, 8))
    for i in range(b):
        n_i, m_i = rollout(par, x0, u_batch[i], h, n_sub)
        nodes[i] = n_i
        mids[i] = m_i
    return nodes, mids
