"""Compiled inner loops: forward kinematics, articulated-body dynamics, rollouts.

The tree is described by flat arrays (see ``dynamics.CompiledModel``).
Dynamic parameters live in one vector ``P``: seven entries per massive link
``[m, cx, cy, cz, Ixx, Iyy, Izz]`` followed by one damping entry per DoF.
Spatial vectors use the ``[angular; linear]`` ordering.
"""
import numpy as np
from numba import njit

OK = 0
DIVERGED = 1
SINGULAR = 2

FIXED = 0
REVOLUTE = 1
PRISMATIC = 2

DIVERGENCE_LIMIT = 1e6


@njit(cache=True)
def _rodrigues(ax, ay, az, q, R):
    c = np.cos(q)
    s = np.sin(q)
    t = 1.0 - c
    R[0, 0] = c + ax * ax * t
    R[0, 1] = ax * ay * t - az * s
    R[0, 2] = ax * az * t + ay * s
    R[1, 0] = ay * ax * t + az * s
    R[1, 1] = c + ay * ay * t
    R[1, 2] = ay * az * t - ax * s
    R[2, 0] = az * ax * t - ay * s
    R[2, 1] = az * ay * t + ax * s
    R[2, 2] = c + az * az * t


@njit(cache=True)
def _joint_frame(i, jtype, dof, axis, mount_R, mount_p, q, Rc, pc, Jr):
    """Child-to-parent rotation ``Rc`` and child origin ``pc`` in the parent frame."""
    for a in range(3):
        for b in range(3):
            Jr[a, b] = 1.0 if a == b else 0.0
    jp0 = 0.0
    jp1 = 0.0
    jp2 = 0.0
    if jtype[i] == REVOLUTE:
        _rodrigues(axis[i, 0], axis[i, 1], axis[i, 2], q[dof[i]], Jr)
    elif jtype[i] == PRISMATIC:
        qi = q[dof[i]]
        jp0 = axis[i, 0] * qi
        jp1 = axis[i, 1] * qi
        jp2 = axis[i, 2] * qi
    for a in range(3):
        for b in range(3):
            acc = 0.0
            for k in range(3):
                acc += mount_R[i, a, k] * Jr[k, b]
            Rc[a, b] = acc
        pc[a] = mount_p[i, a] + mount_R[i, a, 0] * jp0 + mount_R[i, a, 1] * jp1 + mount_R[i, a, 2] * jp2


@njit(cache=True)
def fk(parent, jtype, dof, axis, mount_R, mount_p, q, R_out, p_out):
    """World rotation and origin of every link frame."""
    n = parent.shape[0]
    Rc = np.empty((3, 3))
    pc = np.empty(3)
    Jr = np.empty((3, 3))
    for i in range(n):
        _joint_frame(i, jtype, dof, axis, mount_R, mount_p, q, Rc, pc, Jr)
        pi = parent[i]
        if pi < 0:
            for a in range(3):
                for b in range(3):
                    R_out[i, a, b] = Rc[a, b]
                p_out[i, a] = pc[a]
        else:
            for a in range(3):
                for b in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc += R_out[pi, a, k] * Rc[k, b]
                    R_out[i, a, b] = acc
                p_out[i, a] = (p_out[pi, a] + R_out[pi, a, 0] * pc[0]
                               + R_out[pi, a, 1] * pc[1] + R_out[pi, a, 2] * pc[2])


@njit(cache=True)
def _spatial_inertia(P, slot, I):
    for a in range(6):
        for b in range(6):
            I[a, b] = 0.0
    if slot < 0:
        return
    base = 7 * slot
    m = P[base]
    cx = P[base + 1]
    cy = P[base + 2]
    cz = P[base + 3]
    cc = cx * cx + cy * cy + cz * cz
    c = (cx, cy, cz)
    for a in range(3):
        for b in range(3):
            I[a, b] = m * ((cc if a == b else 0.0) - c[a] * c[b])
        I[a, a] += P[base + 4 + a]
    # m * skew(c) in the top-right block, its transpose bottom-left
    I[0, 4] = -m * cz
    I[0, 5] = m * cy
    I[1, 3] = m * cz
    I[1, 5] = -m * cx
    I[2, 3] = -m * cy
    I[2, 4] = m * cx
    for a in range(3):
        for b in range(3):
            I[3 + b, a] = I[a, 3 + b]
        I[3 + a, 3 + a] = m


@njit(cache=True)
def _crm(v, w, out):
    # [w1; w2] -> [om x w1; vl x w1 + om x w2]
    out[0] = v[1] * w[2] - v[2] * w[1]
    out[1] = v[2] * w[0] - v[0] * w[2]
    out[2] = v[0] * w[1] - v[1] * w[0]
    out[3] = v[4] * w[2] - v[5] * w[1] + v[1] * w[5] - v[2] * w[4]
    out[4] = v[5] * w[0] - v[3] * w[2] + v[2] * w[3] - v[0] * w[5]
    out[5] = v[3] * w[1] - v[4] * w[0] + v[0] * w[4] - v[1] * w[3]


@njit(cache=True)
def _crf(v, f, out):
    # [n; fl] -> [om x n + vl x fl; om x fl]
    out[0] = v[1] * f[2] - v[2] * f[1] + v[4] * f[5] - v[5] * f[4]
    out[1] = v[2] * f[0] - v[0] * f[2] + v[5] * f[3] - v[3] * f[5]
    out[2] = v[0] * f[1] - v[1] * f[0] + v[3] * f[4] - v[4] * f[3]
    out[3] = v[1] * f[5] - v[2] * f[4]
    out[4] = v[2] * f[3] - v[0] * f[5]
    out[5] = v[0] * f[4] - v[1] * f[3]


@njit(cache=True)
def aba(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
        q, qd, tau, qdd, X, v, c, IA, pA, U, D, u, acc, S, scratch):
    """Featherstone's articulated-body algorithm; returns a status code."""
    n = parent.shape[0]
    Rc, pc, Jr, tmp, tmp2, Ia, XtI = scratch
    damp0 = 7 * n_links

    for i in range(n):
        _joint_frame(i, jtype, dof, axis, mount_R, mount_p, q, Rc, pc, Jr)
        # X = [E 0; -E r^ E] with E = Rc^T
        for a in range(6):
            for b in range(6):
                X[i, a, b] = 0.0
        for a in range(3):
            for b in range(3):
                X[i, a, b] = Rc[b, a]
                X[i, 3 + a, 3 + b] = Rc[b, a]
        rx, ry, rz = pc[0], pc[1], pc[2]
        for a in range(3):
            e0 = Rc[0, a]
            e1 = Rc[1, a]
            e2 = Rc[2, a]
            # row a of -E r^ : -(E r^)[a, :] ; r^ = [[0,-rz,ry],[rz,0,-rx],[-ry,rx,0]]
            X[i, 3 + a, 0] = -(e1 * rz - e2 * ry)
            X[i, 3 + a, 1] = -(-e0 * rz + e2 * rx)
            X[i, 3 + a, 2] = -(e0 * ry - e1 * rx)

        for a in range(6):
            S[i, a] = 0.0
        if jtype[i] == REVOLUTE:
            for a in range(3):
                S[i, a] = axis[i, a]
        elif jtype[i] == PRISMATIC:
            for a in range(3):
                S[i, 3 + a] = axis[i, a]

        pi = parent[i]
        for a in range(6):
            acc_v = 0.0
            if pi >= 0:
                for b in range(6):
                    acc_v += X[i, a, b] * v[pi, b]
            v[i, a] = acc_v
        qdi = 0.0
        if jtype[i] != FIXED:
            qdi = qd[dof[i]]
        for a in range(6):
            tmp[a] = S[i, a] * qdi
            v[i, a] += tmp[a]
        _crm(v[i], tmp, c[i])

        _spatial_inertia(P, slot[i], IA[i])
        for a in range(6):
            acc_v = 0.0
            for b in range(6):
                acc_v += IA[i, a, b] * v[i, b]
            tmp[a] = acc_v
        _crf(v[i], tmp, pA[i])

    for i in range(n - 1, -1, -1):
        pi = parent[i]
        if jtype[i] != FIXED:
            d = 0.0
            sp = 0.0
            for a in range(6):
                acc_v = 0.0
                for b in range(6):
                    acc_v += IA[i, a, b] * S[i, b]
                U[i, a] = acc_v
                d += S[i, a] * acc_v
                sp += S[i, a] * pA[i, a]
            if not (d > 1e-12) or not np.isfinite(d):
                return SINGULAR
            D[i] = d
            k = dof[i]
            u[i] = tau[k] - P[damp0 + k] * qd[k] - sp
        if pi < 0:
            continue
        if jtype[i] != FIXED:
            for a in range(6):
                for b in range(6):
                    Ia[a, b] = IA[i, a, b] - U[i, a] * U[i, b] / D[i]
            for a in range(6):
                acc_v = 0.0
                for b in range(6):
                    acc_v += Ia[a, b] * c[i, b]
                tmp2[a] = pA[i, a] + acc_v + U[i, a] * u[i] / D[i]
        else:
            for a in range(6):
                for b in range(6):
                    Ia[a, b] = IA[i, a, b]
            for a in range(6):
                acc_v = 0.0
                for b in range(6):
                    acc_v += Ia[a, b] * c[i, b]
                tmp2[a] = pA[i, a] + acc_v
        # IA[parent] += X^T Ia X ; pA[parent] += X^T pa
        for a in range(6):
            for b in range(6):
                acc_v = 0.0
                for k in range(6):
                    acc_v += X[i, k, a] * Ia[k, b]
                XtI[a, b] = acc_v
        for a in range(6):
            for b in range(6):
                acc_v = 0.0
                for k in range(6):
                    acc_v += XtI[a, k] * X[i, k, b]
                IA[pi, a, b] += acc_v
            acc_v = 0.0
            for k in range(6):
                acc_v += X[i, k, a] * tmp2[k]
            pA[pi, a] += acc_v

    for i in range(n):
        pi = parent[i]
        for a in range(6):
            acc_v = 0.0
            if pi >= 0:
                for b in range(6):
                    acc_v += X[i, a, b] * acc[pi, b]
            else:
                # base acceleration -g makes gravity appear as an inertial force
                for b in range(3):
                    acc_v += X[i, a, 3 + b] * (-gravity[b])
            acc[i, a] = acc_v + c[i, a]
        if jtype[i] != FIXED:
            k = dof[i]
            ua = 0.0
            for a in range(6):
                ua += U[i, a] * acc[i, a]
            qdd[k] = (u[i] - ua) / D[i]
            for a in range(6):
                acc[i, a] += S[i, a] * qdd[k]
    return OK


@njit(cache=True)
def _alloc(n):
    scratch = (np.empty((3, 3)), np.empty(3), np.empty((3, 3)), np.empty(6), np.empty(6),
               np.empty((6, 6)), np.empty((6, 6)))
    return (np.empty((n, 6, 6)), np.empty((n, 6)), np.empty((n, 6)), np.empty((n, 6, 6)),
            np.empty((n, 6)), np.empty((n, 6)), np.empty(n), np.empty(n), np.empty((n, 6)),
            np.empty((n, 6)), scratch)


@njit(cache=True)
def forward_dynamics(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
                     q, qd, tau, qdd):
    X, v, c, IA, pA, U, D, u, acc, S, scr = _alloc(parent.shape[0])
    return aba(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
               q, qd, tau, qdd, X, v, c, IA, pA, U, D, u, acc, S, scr)


@njit(cache=True)
def _step(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
          q, qd, tau, dt, substeps, qdd, X, v, c, IA, pA, U, D, u, acc, S, scr):
    h = dt / substeps
    nd = q.shape[0]
    for _ in range(substeps):
        status = aba(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
                     q, qd, tau, qdd, X, v, c, IA, pA, U, D, u, acc, S, scr)
        if status != OK:
            return status
        for k in range(nd):
            qd[k] += qdd[k] * h
            q[k] += qd[k] * h
    for k in range(nd):
        if not (abs(q[k]) <= DIVERGENCE_LIMIT and abs(qd[k]) <= DIVERGENCE_LIMIT):
            return DIVERGED
    return OK


@njit(cache=True)
def rollout(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
            x0, controls, dt, substeps, states):
    """``states[0] = x0``; ``states[t + 1]`` follows from ``controls[t]``."""
    T = states.shape[0]
    nd = x0.shape[0] // 2
    X, v, c, IA, pA, U, D, u, acc, S, scr = _alloc(parent.shape[0])
    q = x0[:nd].copy()
    qd = x0[nd:].copy()
    qdd = np.zeros(nd)
    if T == 0:
        return OK
    for k in range(2 * nd):
        states[0, k] = x0[k]
    for t in range(T - 1):
        status = _step(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
                       q, qd, controls[t], dt, substeps, qdd, X, v, c, IA, pA, U, D, u, acc, S, scr)
        if status != OK:
            return status
        for k in range(nd):
            states[t + 1, k] = q[k]
            states[t + 1, nd + k] = qd[k]
    return OK


@njit(cache=True)
def rollout_controls_batch(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
                           x0, U_batch, dt, substeps, states, status):
    """Roll one start state under K control sequences; ``states[k, t]`` is after step t."""
    K = U_batch.shape[0]
    H = U_batch.shape[1]
    nd = x0.shape[0] // 2
    X, v, c, IA, pA, U, D, u, acc, S, scr = _alloc(parent.shape[0])
    q = np.empty(nd)
    qd = np.empty(nd)
    qdd = np.zeros(nd)
    for kk in range(K):
        for k in range(nd):
            q[k] = x0[k]
            qd[k] = x0[nd + k]
        status[kk] = OK
        for t in range(H):
            st = _step(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
                       q, qd, U_batch[kk, t], dt, substeps, qdd, X, v, c, IA, pA, U, D, u, acc, S, scr)
            if st != OK:
                status[kk] = st
                for t2 in range(t, H):
                    for k in range(2 * nd):
                        states[kk, t2, k] = np.nan
                break
            for k in range(nd):
                states[kk, t, k] = q[k]
                states[kk, t, nd + k] = qd[k]


@njit(cache=True)
def _frame_residual(parent, jtype, dof, axis, mount_R, mount_p, q, body_link, off_R, off_p,
                    obs_R, obs_p, lam, R_w, p_w, Rb):
    fk(parent, jtype, dof, axis, mount_R, mount_p, q, R_w, p_w)
    total = 0.0
    for b in range(body_link.shape[0]):
        li = body_link[b]
        for a in range(3):
            for k in range(3):
                acc = 0.0
                for m in range(3):
                    acc += R_w[li, a, m] * off_R[b, m, k]
                Rb[a, k] = acc
        dist2 = 0.0
        for a in range(3):
            pa = p_w[li, a] + R_w[li, a, 0] * off_p[b, 0] + R_w[li, a, 1] * off_p[b, 1] + R_w[li, a, 2] * off_p[b, 2]
            dd = pa - obs_p[b, a]
            dist2 += dd * dd
        # chordal rotation error 3 - tr(Rb^T R_obs) = 2 (1 - cos a), which is a^2
        # to fourth order and, unlike the geodesic angle, smooth at a = 0 and a = pi
        tr = 0.0
        for a in range(3):
            for k in range(3):
                tr += Rb[k, a] * obs_R[b, k, a]
        total += lam * lam * (3.0 - tr) + dist2
    return total


@njit(cache=True)
def shoot_windows(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, n_links,
                  P_batch, starts, first, length, controls, obs_R, obs_p, body_link, off_R, off_p,
                  lam, dt, substeps, data_out, end_out, status_out):
    """Simulate independent shooting windows.

    Window ``b`` starts at frame ``first[b]`` from ``starts[b]`` and covers
    ``length[b]`` frames; the squared pose residual summed over those frames
    goes to ``data_out[b]`` and the state one step past the window to
    ``end_out[b]``.
    """
    B = P_batch.shape[0]
    nd = starts.shape[1] // 2
    n = parent.shape[0]
    X, v, c, IA, pA, U, D, u, acc, S, scr = _alloc(n)
    q = np.empty(nd)
    qd = np.empty(nd)
    qdd = np.zeros(nd)
    R_w = np.empty((n, 3, 3))
    p_w = np.empty((n, 3))
    Rb = np.empty((3, 3))
    for bb in range(B):
        P = P_batch[bb]
        for k in range(nd):
            q[k] = starts[bb, k]
            qd[k] = starts[bb, nd + k]
        total = 0.0
        st = OK
        f0 = first[bb]
        for t in range(length[bb]):
            f = f0 + t
            total += _frame_residual(parent, jtype, dof, axis, mount_R, mount_p, q, body_link,
                                     off_R, off_p, obs_R[f], obs_p[f], lam, R_w, p_w, Rb)
            st = _step(parent, jtype, dof, axis, mount_R, mount_p, slot, gravity, P, n_links,
                       q, qd, controls[f], dt, substeps, qdd, X, v, c, IA, pA, U, D, u, acc, S, scr)
            if st != OK:
                break
        status_out[bb] = st
        data_out[bb] = total if st == OK else np.inf
        for k in range(nd):
            end_out[bb, k] = q[k]
            end_out[bb, nd + k] = qd[k]
