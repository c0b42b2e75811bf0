"""SE(2)/SE(3) primitives on plain numpy arrays.

Poses are homogeneous matrices (3x3 for SE(2), 4x4 for SE(3)). Tangent
vectors are ordered [angular; translational]: ``[theta, x, y]`` in SE(2)
and ``[phi(3), rho(3)]`` in SE(3), matching the body-velocity input
``u = [omega; v]``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError, SingularRotationError

SMALL_ANGLE = 1e-6
PI_MARGIN = 1e-6
# below this the Jacobian coefficients use their Taylor series (cancellation)
_SERIES_ANGLE = 0.1

TANGENT_DIM = {2: 3, 3: 6}


def group_dim(T: np.ndarray) -> int:
    """Return n for a pose in SE(n)."""
    T = np.asarray(T)
    if T.shape == (3, 3):
        return 2
    if T.shape == (4, 4):
        return 3
    raise InvalidArgumentError(f"not a homogeneous SE(2)/SE(3) matrix: shape {T.shape}")


def _tangent_group(v: np.ndarray) -> int:
    if v.shape == (3,):
        return 2
    if v.shape == (6,):
        return 3
    raise InvalidArgumentError(f"tangent vector must have length 3 or 6, got shape {v.shape}")


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotz(theta: float) -> np.ndarray:
    R = np.eye(3)
    R[:2, :2] = rot2(theta)
    return R


def make_pose(C: np.ndarray, r) -> np.ndarray:
    n = C.shape[0]
    T = np.eye(n + 1)
    T[:n, :n] = C
    T[:n, n] = r
    return T


def inverse(T: np.ndarray) -> np.ndarray:
    n = T.shape[0] - 1
    C = T[:n, :n]
    Ti = np.eye(n + 1)
    Ti[:n, :n] = C.T
    Ti[:n, n] = -C.T @ T[:n, n]
    return Ti


def is_rotation(C: np.ndarray, tol: float = 1e-9) -> bool:
    n = C.shape[0]
    return bool(
        np.allclose(C @ C.T, np.eye(n), atol=tol, rtol=0.0)
        and abs(np.linalg.det(C) - 1.0) < tol
    )


def check_pose(T: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    n = group_dim(T)
    bottom = np.zeros(n + 1)
    bottom[-1] = 1.0
    if not np.allclose(T[n], bottom, atol=tol, rtol=0.0):
        raise InvalidArgumentError("pose bottom row must be [0 ... 0 1]")
    if not is_rotation(T[:n, :n], tol):
        raise InvalidArgumentError("pose rotation block is not in SO(n)")
    return T


def wedge(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = _tangent_group(v)
    M = np.zeros((n + 1, n + 1))
    if n == 2:
        M[0, 1] = -v[0]
        M[1, 0] = v[0]
        M[:2, 2] = v[1:]
    else:
        M[:3, :3] = skew(v[:3])
        M[:3, 3] = v[3:]
    return M


def vee(M, tol: float = 1e-9) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    n = group_dim(M)
    A = M[:n, :n]
    if np.any(np.abs(M[n]) > tol) or np.any(np.abs(A + A.T) > tol):
        raise InvalidArgumentError("matrix is not in se(n): needs skew block and zero bottom row")
    if n == 2:
        return np.array([M[1, 0], M[0, 2], M[1, 2]])
    return np.array([M[2, 1], M[0, 2], M[1, 0], M[0, 3], M[1, 3], M[2, 3]])


def _so3_coeffs(theta: float):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    a, b, _ = _so3_coeffs(float(np.linalg.norm(phi)))
    W = skew(phi)
    return np.eye(3) + a * W + b * (W @ W)


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    _, b, c = _so3_coeffs(float(np.linalg.norm(phi)))
    W = skew(phi)
    return np.eye(3) + b * W + c * (W @ W)


def so3_log(C: np.ndarray) -> np.ndarray:
    cos_t = 0.5 * (np.trace(C) - 1.0)
    w = np.array([C[2, 1] - C[1, 2], C[0, 2] - C[2, 0], C[1, 0] - C[0, 1]])
    sin_t = 0.5 * np.linalg.norm(w)
    theta = math.atan2(sin_t, cos_t)
    if theta > math.pi - PI_MARGIN:
        raise SingularRotationError(f"rotation angle {theta:.9f} too close to pi for log")
    if theta < SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * w
    return theta / (2.0 * sin_t) * w


def _so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    W = skew(phi)
    if theta < SMALL_ANGLE:
        k = 1.0 / 12.0
    else:
        k = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * W + k * (W @ W)


def _se2_V(theta: float) -> np.ndarray:
    if abs(theta) < SMALL_ANGLE:
        a, b = 1.0 - theta**2 / 6.0, 0.5 * theta - theta**3 / 24.0
    else:
        a, b = math.sin(theta) / theta, (1.0 - math.cos(theta)) / theta
    return np.array([[a, -b], [b, a]])


def exp_map(v) -> np.ndarray:
    """Closed-form exponential, se(n) -> SE(n)."""
    v = np.asarray(v, dtype=float)
    n = _tangent_group(v)
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("exp_map input must be finite")
    if n == 2:
        return make_pose(rot2(v[0]), _se2_V(v[0]) @ v[1:])
    phi, rho = v[:3], v[3:]
    return make_pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log_map(T: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_map` for rotation angles below pi - 1e-6."""
    T = np.asarray(T, dtype=float)
    n = group_dim(T)
    if n == 2:
        theta = math.atan2(T[1, 0], T[0, 0])
        if abs(theta) > math.pi - PI_MARGIN:
            raise SingularRotationError(f"rotation angle {theta:.9f} too close to pi for log")
        rho = np.linalg.solve(_se2_V(theta), T[:2, 2])
        return np.concatenate([[theta], rho])
    phi = so3_log(T[:3, :3])
    return np.concatenate([phi, _so3_left_jacobian_inv(phi) @ T[:3, 3]])


def adjoint(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    n = group_dim(T)
    C, r = T[:n, :n], T[:n, n]
    if n == 2:
        Ad = np.zeros((3, 3))
        Ad[0, 0] = 1.0
        Ad[1, 0] = r[1]
        Ad[2, 0] = -r[0]
        Ad[1:, 1:] = C
        return Ad
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = C
    Ad[3:, 3:] = C
    Ad[3:, :3] = skew(r) @ C
    return Ad


def odot(h) -> np.ndarray:
    """Matrix h^odot with ``odot(h) @ v == wedge(v) @ h`` for homogeneous points."""
    h = np.asarray(h, dtype=float)
    if h.shape not in ((3,), (4,)):
        raise InvalidArgumentError(f"homogeneous point must have length 3 or 4, got {h.shape}")
    if h[-1] != 1.0:
        raise InvalidArgumentError("homogeneous point must end in 1")
    if h.shape == (3,):
        out = np.zeros((3, 3))
        out[0, 0] = -h[1]
        out[1, 0] = h[0]
        out[:2, 1:] = np.eye(2)
        return out
    out = np.zeros((4, 6))
    out[:3, :3] = -skew(h[:3])
    out[:3, 3:] = np.eye(3)
    return out


def _se3_Q(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    P, R = skew(phi), skew(rho)
    t2 = theta * theta
    if theta < _SERIES_ANGLE:
        t4, t6 = t2 * t2, t2 * t2 * t2
        b = 1 / 6 - t2 / 120 + t4 / 5040 - t6 / 362880
        c = 1 / 24 - t2 / 720 + t4 / 40320 - t6 / 3628800
        d = 1 / 120 - t2 / 2520 + t4 / 120960 - t6 / 9979200
    else:
        s, co = math.sin(theta), math.cos(theta)
        b = (theta - s) / theta**3
        c = (t2 + 2.0 * co - 2.0) / (2.0 * t2 * t2)
        d = (2.0 * theta - 3.0 * s + theta * co) / (2.0 * theta**5)
    PR, RP = P @ R, R @ P
    PRP = PR @ P
    return (
        0.5 * R
        + b * (PR + RP + PRP)
        + c * (P @ PR + RP @ P - 3.0 * PRP)
        + d * (PRP @ P + P @ PRP)
    )


def left_jacobian(v) -> np.ndarray:
    """Left Jacobian of SE(n), sum_k ad(v)^k / (k+1)!."""
    v = np.asarray(v, dtype=float)
    n = _tangent_group(v)
    if n == 2:
        theta = v[0]
        J = np.zeros((3, 3))
        J[0, 0] = 1.0
        J[1:, 1:] = _se2_V(theta)
        if abs(theta) < _SERIES_ANGLE:
            t2 = theta * theta
            a = 0.5 - t2 / 24 + t2 * t2 / 720
            tb = theta * (1 / 6 - t2 / 120 + t2 * t2 / 5040)
        else:
            a = (1.0 - math.cos(theta)) / theta**2
            tb = (theta - math.sin(theta)) / theta**2
        W = np.array([[a, -tb], [tb, a]])
        J[1:, 0] = W @ np.array([v[2], -v[1]])
        return J
    phi, rho = v[:3], v[3:]
    Jphi = so3_left_jacobian(phi)
    J = np.zeros((6, 6))
    J[:3, :3] = Jphi
    J[3:, 3:] = Jphi
    J[3:, :3] = _se3_Q(phi, rho)
    return J


def right_jacobian(v) -> np.ndarray:
    return left_jacobian(-np.asarray(v, dtype=float))


def rotation_angle(C: np.ndarray) -> float:
    """Angle of a 2x2 or 3x3 rotation matrix in [0, pi]."""
    if C.shape == (2, 2):
        return abs(math.atan2(C[1, 0], C[0, 0]))
    w = np.array([C[2, 1] - C[1, 2], C[0, 2] - C[2, 0], C[1, 0] - C[0, 1]])
    return math.atan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(C) - 1.0))
