"""Vectorized numpy kernels (the fallback path).

Every function is batched over a leading axis (particles or GSF modes) and
works on SE(3) only. Signatures mirror ``_numba_impl`` exactly.
"""

import numpy as np

SMALL_ANGLE = 1e-6
SERIES_ANGLE = 0.1
LOG_2PI = np.log(2.0 * np.pi)


def skew_batch(w):
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _so3_coeffs(theta):
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def se3_exp_batch(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    a, b, c = _so3_coeffs(np.linalg.norm(phi, axis=-1))
    W = skew_batch(phi)
    WW = W @ W
    I = np.eye(3)
    C = I + a[..., None, None] * W + b[..., None, None] * WW
    J = I + b[..., None, None] * W + c[..., None, None] * WW
    T = np.zeros(xi.shape[:-1] + (4, 4))
    T[..., :3, :3] = C
    T[..., :3, 3] = np.einsum("...ij,...j->...i", J, rho)
    T[..., 3, 3] = 1.0
    return T


def se3_inv_batch(T):
    Ti = np.zeros_like(T)
    Ct = np.swapaxes(T[..., :3, :3], -1, -2)
    Ti[..., :3, :3] = Ct
    Ti[..., :3, 3] = -np.einsum("...ij,...j->...i", Ct, T[..., :3, 3])
    Ti[..., 3, 3] = 1.0
    return Ti


def se3_adjoint_batch(T):
    C, r = T[..., :3, :3], T[..., :3, 3]
    Ad = np.zeros(T.shape[:-2] + (6, 6))
    Ad[..., :3, :3] = C
    Ad[..., 3:, 3:] = C
    Ad[..., 3:, :3] = skew_batch(r) @ C
    return Ad


def se3_left_jac_batch(xi):
    phi, rho = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    _, b0, c0 = _so3_coeffs(theta)
    P, R = skew_batch(phi), skew_batch(rho)
    PP = P @ P
    Jphi = np.eye(3) + b0[..., None, None] * P + c0[..., None, None] * PP

    series = theta < SERIES_ANGLE
    t = np.where(series, 1.0, theta)
    t2 = theta * theta
    t4, t6 = t2 * t2, t2 * t2 * t2
    s, co = np.sin(t), np.cos(t)
    b = np.where(series, 1 / 6 - t2 / 120 + t4 / 5040 - t6 / 362880, (t - s) / t**3)
    c = np.where(series, 1 / 24 - t2 / 720 + t4 / 40320 - t6 / 3628800,
                 (t * t + 2.0 * co - 2.0) / (2.0 * t**4))
    d = np.where(series, 1 / 120 - t2 / 2520 + t4 / 120960 - t6 / 9979200,
                 (2.0 * t - 3.0 * s + t * co) / (2.0 * t**5))
    PR, RP = P @ R, R @ P
    PRP = PR @ P
    Qm = (0.5 * R + b[..., None, None] * (PR + RP + PRP)
          + c[..., None, None] * (P @ PR + RP @ P - 3.0 * PRP)
          + d[..., None, None] * (PRP @ P + P @ PRP))
    J = np.zeros(xi.shape[:-1] + (6, 6))
    J[..., :3, :3] = Jphi
    J[..., 3:, 3:] = Jphi
    J[..., 3:, :3] = Qm
    return J


def se3_log_batch(T):
    """Logarithm without the pi guard; near pi the axis comes from C + C^T."""
    C, r = T[..., :3, :3], T[..., :3, 3]
    w = np.stack([C[..., 2, 1] - C[..., 1, 2],
                  C[..., 0, 2] - C[..., 2, 0],
                  C[..., 1, 0] - C[..., 0, 1]], axis=-1)
    cos_t = 0.5 * (np.trace(C, axis1=-2, axis2=-1) - 1.0)
    sin_t = 0.5 * np.linalg.norm(w, axis=-1)
    theta = np.arctan2(sin_t, cos_t)
    small = theta < SMALL_ANGLE
    near_pi = (sin_t < 1e-4) & (cos_t < 0.0)
    k = np.where(small, 0.5 * (1.0 + theta * theta / 6.0),
                 theta / (2.0 * np.where(small | near_pi, 1.0, sin_t)))
    phi = k[..., None] * w
    if np.any(near_pi):
        idx = np.nonzero(near_pi)
        B = 0.5 * (C[idx] + np.swapaxes(C[idx], -1, -2)) - cos_t[idx][..., None, None] * np.eye(3)
        B = B / (1.0 - cos_t[idx])[..., None, None]
        col = np.argmax(np.diagonal(B, axis1=-2, axis2=-1), axis=-1)
        axis = np.take_along_axis(B, col[..., None, None], axis=-1)[..., 0]
        axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
        sgn = np.where(np.einsum("...i,...i->...", axis, w[idx]) < 0.0, -1.0, 1.0)
        phi[idx] = (sgn * theta[idx])[..., None] * axis
    th = np.linalg.norm(phi, axis=-1)
    Wp = skew_batch(phi)
    sm = th < SMALL_ANGLE
    tt = np.where(sm, 1.0, th)
    kk = np.where(sm, 1.0 / 12.0, (1.0 - tt * np.sin(tt) / (2.0 * (1.0 - np.cos(tt)))) / (tt * tt))
    Jinv = np.eye(3) - 0.5 * Wp + kk[..., None, None] * (Wp @ Wp)
    rho = np.einsum("...ij,...j->...i", Jinv, r)
    return np.concatenate([phi, rho], axis=-1)


def propagate_batch(X, u, dt):
    """X: (B, K, 4, 4); u: (B, N, 6) per-sample inputs. Returns propagated X."""
    E1inv = se3_exp_batch(-dt * u[:, 0])
    Ep = se3_exp_batch(dt * u[:, 1:])
    return E1inv[:, None] @ X @ Ep


def _tag_positions(X, tag_robot, tag_off):
    M = X.shape[0]
    Xf = np.concatenate([np.broadcast_to(np.eye(4), (M, 1, 4, 4)), X], axis=1)
    Ts = Xf[:, tag_robot]
    return np.einsum("mtij,tj->mti", Ts[..., :3, :3], tag_off) + Ts[..., :3, 3], Xf


def ranges_batch(X, tag_robot, tag_off, edges):
    pos, _ = _tag_positions(X, tag_robot, tag_off)
    diff = pos[:, edges[:, 0]] - pos[:, edges[:, 1]]
    return np.sqrt(np.einsum("mei,mei->me", diff, diff))


def ranges_jacobian_batch(X, tag_robot, tag_off, edges):
    M, K = X.shape[0], X.shape[1]
    E = edges.shape[0]
    pos, Xf = _tag_positions(X, tag_robot, tag_off)
    diff = pos[:, edges[:, 0]] - pos[:, edges[:, 1]]
    dist = np.sqrt(np.einsum("mei,mei->me", diff, diff))
    rho = diff / np.where(dist > 0.0, dist, 1.0)[..., None]
    H = np.zeros((M, E, 6 * K))
    ra, rb = tag_robot[edges[:, 0]], tag_robot[edges[:, 1]]
    rows = np.arange(E)
    for r, tags, sign in ((ra, edges[:, 0], 1.0), (rb, edges[:, 1], -1.0)):
        sel = (r > 0) & (ra != rb)
        if not np.any(sel):
            continue
        Cs = Xf[:, r[sel], :3, :3]
        CTrho = np.einsum("msji,msj->msi", Cs, rho[:, sel])
        ang = np.cross(tag_off[tags[sel]], CTrho)
        cols = (r[sel] - 1)[:, None] * 6 + np.arange(6)
        H[:, rows[sel][:, None], cols] = sign * np.concatenate([ang, CTrho], axis=-1)
    return dist, H


def repair_cov_batch(P):
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    try:
        np.linalg.cholesky(P)
        return P
    except np.linalg.LinAlgError:
        pass
    out = P.copy()
    for i in range(P.shape[0]):
        try:
            np.linalg.cholesky(P[i])
        except np.linalg.LinAlgError:
            vals, vecs = np.linalg.eigh(P[i])
            out[i] = (vecs * np.maximum(vals, 0.0)) @ vecs.T
            out[i] = 0.5 * (out[i] + out[i].T)
    return out


def ekf_predict_batch(X, P, u, Q, dt):
    """Predict every mode with shared inputs u (N, 6) and input covariances Q (N, 6, 6)."""
    M, K = X.shape[0], X.shape[1]
    D = 6 * K
    E1inv = se3_exp_batch(-dt * u[0])
    Ep = se3_exp_batch(dt * u[1:])
    Epinv = se3_inv_batch(Ep)
    B = X @ Ep
    Xn = E1inv @ B
    Ablk = se3_adjoint_batch(Epinv)
    A = np.zeros((D, D))
    Qp = np.zeros((D, D))
    Jl1 = se3_left_jac_batch(dt * u[0])
    Lp = dt * se3_left_jac_batch(-dt * u[1:])
    for k in range(K):
        sl = slice(6 * k, 6 * k + 6)
        A[sl, sl] = Ablk[k]
        Qp[sl, sl] = Lp[k] @ Q[k + 1] @ Lp[k].T
    L1 = (-dt * se3_adjoint_batch(se3_inv_batch(B)) @ Jl1).reshape(M, D, 6)
    Pn = A @ P @ A.T + L1 @ Q[0] @ np.swapaxes(L1, -1, -2) + Qp
    return Xn, repair_cov_batch(Pn)


def ekf_correct_batch(X, P, y, r_var, tag_robot, tag_off, edges):
    """EKF correction of every mode. Returns (X, P, S, loglik, ok)."""
    M, K = X.shape[0], X.shape[1]
    D = 6 * K
    E = edges.shape[0]
    yhat, H = ranges_jacobian_batch(X, tag_robot, tag_off, edges)
    HT = np.swapaxes(H, -1, -2)
    S = H @ P @ HT + np.diag(r_var)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    ok = np.ones(M, dtype=bool)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        for i in range(M):
            try:
                np.linalg.cholesky(S[i])
            except np.linalg.LinAlgError:
                ok[i] = False
        Xn, Pn, loglik = X.copy(), P.copy(), np.full(M, -np.inf)
        if ok.any():
            Xg, Pg, _, lg, _ = ekf_correct_batch(X[ok], P[ok], y, r_var, tag_robot, tag_off, edges)
            Xn[ok], Pn[ok], loglik[ok] = Xg, Pg, lg
        return Xn, Pn, S, loglik, ok
    nu = y - yhat
    Kt = np.linalg.solve(S, H @ P)
    Kg = np.swapaxes(Kt, -1, -2)
    dx = np.einsum("mde,me->md", Kg, nu)
    Xn = X @ se3_exp_batch(dx.reshape(M, K, 6))
    IKH = np.eye(D) - Kg @ H
    Pn = IKH @ P @ np.swapaxes(IKH, -1, -2) + (Kg * r_var) @ Kt
    z = np.linalg.solve(L, nu[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    loglik = -0.5 * (np.einsum("mi,mi->m", z, z) + logdet + E * LOG_2PI)
    return Xn, repair_cov_batch(Pn), S, loglik, ok
