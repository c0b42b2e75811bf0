"""numba-compiled kernels. Same signatures and results as ``_numpy_impl``."""

import math

import numpy as np
from numba import njit

SMALL_ANGLE = 1e-6
SERIES_ANGLE = 0.1
LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def _skew(w):
    S = np.zeros((3, 3))
    S[0, 1] = -w[2]
    S[0, 2] = w[1]
    S[1, 0] = w[2]
    S[1, 2] = -w[0]
    S[2, 0] = -w[1]
    S[2, 1] = w[0]
    return S


@njit(cache=True)
def _so3_coeffs(theta):
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = math.sin(theta)
    return s / theta, (1.0 - math.cos(theta)) / (theta * theta), (theta - s) / (theta * theta * theta)


@njit(cache=True)
def _exp(xi, scale, out):
    p0, p1, p2 = scale * xi[0], scale * xi[1], scale * xi[2]
    r0, r1, r2 = scale * xi[3], scale * xi[4], scale * xi[5]
    theta = math.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
    a, b, c = _so3_coeffs(theta)
    # W and W @ W for the skew matrix of phi
    W = ((0.0, -p2, p1), (p2, 0.0, -p0), (-p1, p0, 0.0))
    for i in range(3):
        for j in range(3):
            ww = W[i][0] * W[0][j] + W[i][1] * W[1][j] + W[i][2] * W[2][j]
            eye = 1.0 if i == j else 0.0
            out[i, j] = eye + a * W[i][j] + b * ww
    for i in range(3):
        acc = 0.0
        for j in range(3):
            ww = W[i][0] * W[0][j] + W[i][1] * W[1][j] + W[i][2] * W[2][j]
            eye = 1.0 if i == j else 0.0
            rj = r0 if j == 0 else (r1 if j == 1 else r2)
            acc += (eye + b * W[i][j] + c * ww) * rj
        out[i, 3] = acc
    out[3, 0] = 0.0
    out[3, 1] = 0.0
    out[3, 2] = 0.0
    out[3, 3] = 1.0


@njit(cache=True)
def _mul(A, B, out):
    """Affine product of two 4x4 homogeneous matrices."""
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
        out[i, 3] = A[i, 0] * B[0, 3] + A[i, 1] * B[1, 3] + A[i, 2] * B[2, 3] + A[i, 3]
    out[3, 0] = 0.0
    out[3, 1] = 0.0
    out[3, 2] = 0.0
    out[3, 3] = 1.0


@njit(cache=True)
def _inv(T, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = T[j, i]
    for i in range(3):
        out[i, 3] = -(T[0, i] * T[0, 3] + T[1, i] * T[1, 3] + T[2, i] * T[2, 3])
    out[3, 0] = 0.0
    out[3, 1] = 0.0
    out[3, 2] = 0.0
    out[3, 3] = 1.0


@njit(cache=True)
def _adjoint(T, out):
    out[:, :] = 0.0
    r = T[:3, 3]
    for i in range(3):
        for j in range(3):
            out[i, j] = T[i, j]
            out[3 + i, 3 + j] = T[i, j]
    R = _skew(r)
    for i in range(3):
        for j in range(3):
            out[3 + i, j] = R[i, 0] * T[0, j] + R[i, 1] * T[1, j] + R[i, 2] * T[2, j]


@njit(cache=True)
def _left_jac(xi, scale):
    phi = scale * xi[:3]
    rho = scale * xi[3:]
    theta = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    _, b0, c0 = _so3_coeffs(theta)
    P = _skew(phi)
    R = _skew(rho)
    PP = P @ P
    Jphi = np.eye(3) + b0 * P + c0 * PP
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        t4 = t2 * t2
        t6 = t4 * t2
        b = 1 / 6 - t2 / 120 + t4 / 5040 - t6 / 362880
        c = 1 / 24 - t2 / 720 + t4 / 40320 - t6 / 3628800
        d = 1 / 120 - t2 / 2520 + t4 / 120960 - t6 / 9979200
    else:
        s = math.sin(theta)
        co = math.cos(theta)
        b = (theta - s) / theta**3
        c = (t2 + 2.0 * co - 2.0) / (2.0 * t2 * t2)
        d = (2.0 * theta - 3.0 * s + theta * co) / (2.0 * theta**5)
    PR = P @ R
    RP = R @ P
    PRP = PR @ P
    Qm = 0.5 * R + b * (PR + RP + PRP) + c * (P @ PR + RP @ P - 3.0 * PRP) + d * (PRP @ P + P @ PRP)
    J = np.zeros((6, 6))
    J[:3, :3] = Jphi
    J[3:, 3:] = Jphi
    J[3:, :3] = Qm
    return J


@njit(cache=True)
def _log(T, out):
    c00, c01, c02 = T[0, 0], T[0, 1], T[0, 2]
    c10, c11, c12 = T[1, 0], T[1, 1], T[1, 2]
    c20, c21, c22 = T[2, 0], T[2, 1], T[2, 2]
    w0 = c21 - c12
    w1 = c02 - c20
    w2 = c10 - c01
    cos_t = 0.5 * (c00 + c11 + c22 - 1.0)
    sin_t = 0.5 * math.sqrt(w0 * w0 + w1 * w1 + w2 * w2)
    theta = math.atan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        k = 0.5 * (1.0 + theta * theta / 6.0)
        p0, p1, p2 = k * w0, k * w1, k * w2
    elif sin_t < 1e-4 and cos_t < 0.0:
        # near a half turn the skew part vanishes; take the axis from C + C^T
        s = 1.0 / (1.0 - cos_t)
        b00 = (c00 - cos_t) * s
        b11 = (c11 - cos_t) * s
        b22 = (c22 - cos_t) * s
        if b00 >= b11 and b00 >= b22:
            a0, a1, a2 = b00, 0.5 * (c10 + c01) * s, 0.5 * (c20 + c02) * s
        elif b11 >= b22:
            a0, a1, a2 = 0.5 * (c01 + c10) * s, b11, 0.5 * (c21 + c12) * s
        else:
            a0, a1, a2 = 0.5 * (c02 + c20) * s, 0.5 * (c12 + c21) * s, b22
        n = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        sgn = -1.0 if a0 * w0 + a1 * w1 + a2 * w2 < 0.0 else 1.0
        k = sgn * theta / n
        p0, p1, p2 = k * a0, k * a1, k * a2
    else:
        k = theta / (2.0 * sin_t)
        p0, p1, p2 = k * w0, k * w1, k * w2
    th = math.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
    if th < SMALL_ANGLE:
        kk = 1.0 / 12.0
    else:
        kk = (1.0 - th * math.sin(th) / (2.0 * (1.0 - math.cos(th)))) / (th * th)
    r0, r1, r2 = T[0, 3], T[1, 3], T[2, 3]
    # J^-1 r = r - 0.5 phi x r + kk phi x (phi x r)
    x0 = p1 * r2 - p2 * r1
    x1 = p2 * r0 - p0 * r2
    x2 = p0 * r1 - p1 * r0
    y0 = p1 * x2 - p2 * x1
    y1 = p2 * x0 - p0 * x2
    y2 = p0 * x1 - p1 * x0
    out[0], out[1], out[2] = p0, p1, p2
    out[3] = r0 - 0.5 * x0 + kk * y0
    out[4] = r1 - 0.5 * x1 + kk * y1
    out[5] = r2 - 0.5 * x2 + kk * y2


@njit(cache=True)
def _se3_exp_batch(xi):
    out = np.empty((xi.shape[0], 4, 4))
    for b in range(xi.shape[0]):
        _exp(xi[b], 1.0, out[b])
    return out


def se3_exp_batch(xi):
    xi = np.asarray(xi, dtype=float)
    lead = xi.shape[:-1]
    return _se3_exp_batch(np.ascontiguousarray(xi.reshape(-1, 6))).reshape(lead + (4, 4))


@njit(cache=True)
def _se3_log_batch(T):
    out = np.empty((T.shape[0], 6))
    for b in range(T.shape[0]):
        _log(T[b], out[b])
    return out


def se3_log_batch(T):
    T = np.asarray(T, dtype=float)
    lead = T.shape[:-2]
    return _se3_log_batch(np.ascontiguousarray(T.reshape(-1, 4, 4))).reshape(lead + (6,))


@njit(cache=True)
def propagate_batch(X, u, dt):
    B, K = X.shape[0], X.shape[1]
    out = np.empty_like(X)
    E1 = np.empty((4, 4))
    Ep = np.empty((4, 4))
    tmp = np.empty((4, 4))
    for b in range(B):
        _exp(u[b, 0], -dt, E1)
        for k in range(K):
            _exp(u[b, k + 1], dt, Ep)
            _mul(X[b, k], Ep, tmp)
            _mul(E1, tmp, out[b, k])
    return out


@njit(cache=True)
def _tag_pos(X, m, robot, off, out):
    if robot == 0:
        out[0], out[1], out[2] = off[0], off[1], off[2]
        return
    T = X[m, robot - 1]
    for i in range(3):
        out[i] = T[i, 0] * off[0] + T[i, 1] * off[1] + T[i, 2] * off[2] + T[i, 3]


@njit(cache=True)
def ranges_batch(X, tag_robot, tag_off, edges):
    B = X.shape[0]
    E = edges.shape[0]
    nt = tag_robot.shape[0]
    out = np.empty((B, E))
    pos = np.empty((nt, 3))
    for b in range(B):
        for t in range(nt):
            r = tag_robot[t]
            o0, o1, o2 = tag_off[t, 0], tag_off[t, 1], tag_off[t, 2]
            if r == 0:
                pos[t, 0], pos[t, 1], pos[t, 2] = o0, o1, o2
            else:
                for i in range(3):
                    pos[t, i] = (X[b, r - 1, i, 0] * o0 + X[b, r - 1, i, 1] * o1
                                 + X[b, r - 1, i, 2] * o2 + X[b, r - 1, i, 3])
        for e in range(E):
            ta, tb = edges[e, 0], edges[e, 1]
            d0 = pos[ta, 0] - pos[tb, 0]
            d1 = pos[ta, 1] - pos[tb, 1]
            d2 = pos[ta, 2] - pos[tb, 2]
            out[b, e] = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    return out


@njit(cache=True)
def ranges_jacobian_batch(X, tag_robot, tag_off, edges):
    M, K = X.shape[0], X.shape[1]
    E = edges.shape[0]
    dist = np.empty((M, E))
    H = np.zeros((M, E, 6 * K))
    pa = np.empty(3)
    pb = np.empty(3)
    rho = np.empty(3)
    for m in range(M):
        for e in range(E):
            ta, tb = edges[e, 0], edges[e, 1]
            ra, rb = tag_robot[ta], tag_robot[tb]
            _tag_pos(X, m, ra, tag_off[ta], pa)
            _tag_pos(X, m, rb, tag_off[tb], pb)
            for i in range(3):
                rho[i] = pa[i] - pb[i]
            dd = math.sqrt(rho[0] ** 2 + rho[1] ** 2 + rho[2] ** 2)
            dist[m, e] = dd
            if ra == rb:
                continue
            if dd > 0.0:
                rho /= dd
            for side in range(2):
                r = ra if side == 0 else rb
                if r == 0:
                    continue
                off = tag_off[ta] if side == 0 else tag_off[tb]
                sign = 1.0 if side == 0 else -1.0
                C = X[m, r - 1]
                ct0 = C[0, 0] * rho[0] + C[1, 0] * rho[1] + C[2, 0] * rho[2]
                ct1 = C[0, 1] * rho[0] + C[1, 1] * rho[1] + C[2, 1] * rho[2]
                ct2 = C[0, 2] * rho[0] + C[1, 2] * rho[1] + C[2, 2] * rho[2]
                c0 = 6 * (r - 1)
                H[m, e, c0 + 0] = sign * (off[1] * ct2 - off[2] * ct1)
                H[m, e, c0 + 1] = sign * (off[2] * ct0 - off[0] * ct2)
                H[m, e, c0 + 2] = sign * (off[0] * ct1 - off[1] * ct0)
                H[m, e, c0 + 3] = sign * ct0
                H[m, e, c0 + 4] = sign * ct1
                H[m, e, c0 + 5] = sign * ct2
    return dist, H


@njit(cache=True)
def _cholesky(A):
    """Lower Cholesky factor; second value False when A is not positive definite."""
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def _repair(P):
    P = 0.5 * (P + P.T)
    _, ok = _cholesky(P)
    if ok:
        return P
    vals, vecs = np.linalg.eigh(P)
    for i in range(vals.shape[0]):
        if vals[i] < 0.0:
            vals[i] = 0.0
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


@njit(cache=True)
def repair_cov_batch(P):
    out = np.empty_like(P)
    for i in range(P.shape[0]):
        out[i] = _repair(np.ascontiguousarray(P[i]))
    return out


@njit(cache=True)
def ekf_predict_batch(X, P, u, Q, dt):
    M, K = X.shape[0], X.shape[1]
    D = 6 * K
    E1inv = np.empty((4, 4))
    _exp(u[0], -dt, E1inv)
    Jl1 = _left_jac(u[0], dt)
    A = np.zeros((D, D))
    Qp = np.zeros((D, D))
    Ep = np.empty((K, 4, 4))
    Epinv = np.empty((4, 4))
    Ad = np.empty((6, 6))
    for k in range(K):
        _exp(u[k + 1], dt, Ep[k])
        _inv(Ep[k], Epinv)
        _adjoint(Epinv, Ad)
        A[6 * k:6 * k + 6, 6 * k:6 * k + 6] = Ad
        Lp = dt * _left_jac(u[k + 1], -dt)
        Qp[6 * k:6 * k + 6, 6 * k:6 * k + 6] = Lp @ np.ascontiguousarray(Q[k + 1]) @ Lp.T
    Q0 = np.ascontiguousarray(Q[0])
    Xn = np.empty_like(X)
    Pn = np.empty_like(P)
    Bm = np.empty((4, 4))
    Binv = np.empty((4, 4))
    L1 = np.empty((D, 6))
    for m in range(M):
        for k in range(K):
            _mul(X[m, k], Ep[k], Bm)
            _mul(E1inv, Bm, Xn[m, k])
            _inv(Bm, Binv)
            _adjoint(Binv, Ad)
            L1[6 * k:6 * k + 6] = -dt * (Ad @ Jl1)
        Pm = np.ascontiguousarray(P[m])
        Pn[m] = _repair(A @ Pm @ A.T + L1 @ Q0 @ L1.T + Qp)
    return Xn, Pn


@njit(cache=True)
def _tri_solve_lower(L, b):
    n = L.shape[0]
    x = np.empty_like(b)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def ekf_correct_batch(X, P, y, r_var, tag_robot, tag_off, edges):
    M, K = X.shape[0], X.shape[1]
    D = 6 * K
    E = edges.shape[0]
    yhat, H = ranges_jacobian_batch(X, tag_robot, tag_off, edges)
    Xn = X.copy()
    Pn = P.copy()
    S_all = np.empty((M, E, E))
    loglik = np.full(M, -np.inf)
    ok = np.ones(M, dtype=np.bool_)
    Rm = np.diag(r_var)
    eye = np.eye(D)
    dT = np.empty((4, 4))
    tmp = np.empty((4, 4))
    for m in range(M):
        Hm = np.ascontiguousarray(H[m])
        Pm = np.ascontiguousarray(P[m])
        HP = Hm @ Pm
        S = HP @ Hm.T + Rm
        S = 0.5 * (S + S.T)
        S_all[m] = S
        L, good = _cholesky(S)
        if not good:
            ok[m] = False
            continue
        Kt = np.linalg.solve(S, HP)
        Kg = np.ascontiguousarray(Kt.T)
        nu = y - yhat[m]
        dx = Kg @ nu
        for k in range(K):
            _exp(dx[6 * k:6 * k + 6], 1.0, dT)
            _mul(X[m, k], dT, tmp)
            Xn[m, k] = tmp
        IKH = eye - Kg @ Hm
        KR = Kg * r_var
        Pn[m] = _repair(IKH @ Pm @ IKH.T + KR @ Kt)
        z = _tri_solve_lower(L, nu)
        logdet = 0.0
        for i in range(E):
            logdet += 2.0 * math.log(L[i, i])
        loglik[m] = -0.5 * (z @ z + logdet + E * LOG_2PI)
    return Xn, Pn, S_all, loglik, ok


def se3_inv_batch(T):
    from . import _numpy_impl

    return _numpy_impl.se3_inv_batch(T)
