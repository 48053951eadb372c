"""Rotation representations: axis-angle, rotation matrices, 6D and Euler XYZ.

Functions accept a single value or a leading batch of values, e.g. axis-angle
arrays of shape ``(..., 3)`` map to matrices of shape ``(..., 3, 3)``.
The ``*_vjp`` functions are the reverse-mode derivatives used by the model
layer and the regressor heads.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import AmbiguousMean, DegenerateSixD, NotARotation

# below this angle the Rodrigues coefficients switch to their Taylor series
_SERIES_ANGLE = 1e-4
# past this angle the axis is read from the symmetric part of the matrix
_NEAR_PI = np.pi - 1e-3
_ORTHO_TOL = 1e-6
_SIXD_EPS = 1e-12
_GIMBAL_EPS = 1e-9


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of ``v`` (batched)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _vee_antisym(m: np.ndarray) -> np.ndarray:
    # <m, hat(e_i)> for i = 0, 1, 2
    return np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def _rodrigues_coeffs(theta: np.ndarray, derivs: bool = True):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t."""
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, 1.0 - t2 / 6.0, s / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - c) / (t * t))
    if not derivs:
        return a, b
    da = np.where(small, -1.0 / 3.0 + t2 / 30.0, (t * c - s) / t**3)
    db = np.where(small, -1.0 / 12.0 + t2 / 180.0, (t * s - 2.0 * (1.0 - c)) / t**4)
    return a, b, da, db


def aa_to_mat(v) -> np.ndarray:
    """Rodrigues formula, continuous through the zero rotation."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b = _rodrigues_coeffs(theta, derivs=False)
    K = hat(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def aa_to_mat_vjp(v, grad_R) -> np.ndarray:
    """Pull a gradient w.r.t. ``aa_to_mat(v)`` back to ``v``."""
    v = np.asarray(v, dtype=float)
    G = np.asarray(grad_R, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b, da, db = _rodrigues_coeffs(theta)
    K = hat(v)
    K2 = K @ K
    out = a[..., None] * _vee_antisym(G)
    out += b[..., None] * _vee_antisym(-(G @ K) - K @ G)
    gk = np.sum(G * K, axis=(-2, -1))
    gk2 = np.sum(G * K2, axis=(-2, -1))
    out += (da * gk + db * gk2)[..., None] * v
    return out


def check_rotation(m, tol: float = _ORTHO_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise NotARotation(f"expected (..., 3, 3), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotARotation("non-finite rotation matrix")
    err = np.abs(np.swapaxes(m, -1, -2) @ m - np.eye(3)).max(initial=0.0)
    if err > tol or np.any(np.linalg.det(m) <= 0):
        raise NotARotation(f"matrix is not a proper rotation (orthonormality error {err:.2e})")
    return m


def mat_to_aa(m) -> np.ndarray:
    """Canonical axis-angle (angle in [0, pi]) of a rotation matrix."""
    m = check_rotation(m)
    vee = 0.5 * _vee_antisym(m)  # sin(angle) * axis
    sin_t = np.linalg.norm(vee, axis=-1)
    cos_t = 0.5 * (np.trace(m, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)

    small = theta < _SERIES_ANGLE
    # exact half turns give sin = 0 here; they are replaced below
    safe = np.where(small | (sin_t == 0.0), 1.0, sin_t)
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / safe)
    out = vee * scale[..., None]

    near_pi = theta > _NEAR_PI
    if np.any(near_pi):
        mp = m[near_pi]
        th = theta[near_pi]
        sym = 0.5 * (mp + np.swapaxes(mp, -1, -2))
        kk = (sym - np.cos(th)[:, None, None] * np.eye(3)) / (1.0 - np.cos(th))[:, None, None]
        idx = np.argmax(np.diagonal(kk, axis1=-2, axis2=-1), axis=-1)
        col = kk[np.arange(len(idx)), :, idx]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.sign(np.sum(axis * vee[near_pi], axis=-1))
        axis *= np.where(sign < 0, -1.0, 1.0)[:, None]
        out[near_pi] = axis * th[:, None]
    return out


def sixd_to_mat(r) -> np.ndarray:
    """Gram-Schmidt map from two column vectors ``(a1, a2)`` to a rotation."""
    r = np.asarray(r, dtype=float)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _SIXD_EPS):
        raise DegenerateSixD("first column has zero length")
    b1 = a1 / n1
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n2 < _SIXD_EPS):
        raise DegenerateSixD("second column is parallel to the first")
    b2 = u / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def sixd_to_mat_vjp(r, grad_R) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    G = np.asarray(grad_R, dtype=float)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    d = np.sum(b1 * a2, axis=-1, keepdims=True)
    u = a2 - d * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    b2 = u / n2
    g1, g2, g3 = G[..., :, 0], G[..., :, 1], G[..., :, 2]

    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    gu = (gb2 - b2 * np.sum(b2 * gb2, axis=-1, keepdims=True)) / n2
    ga2 = gu.copy()
    gd = -np.sum(gu * b1, axis=-1, keepdims=True)
    gb1 = gb1 - d * gu + gd * a2
    ga2 += gd * b1
    ga1 = (gb1 - b1 * np.sum(b1 * gb1, axis=-1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def mat_to_sixd(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def angle_sq_from_mat(m) -> np.ndarray:
    """Squared rotation angle, via the trace (valid on SO(3))."""
    m = np.asarray(m, dtype=float)
    c = np.clip(0.5 * (np.trace(m, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    return np.arccos(c) ** 2


def angle_sq_from_mat_vjp(m, grad) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    c = np.clip(0.5 * (np.trace(m, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    phi = np.arccos(c)
    s = np.sin(phi)
    # phi / sin(phi), capped near pi where the trace loses the angle
    ratio = np.where(phi < 1e-6, 1.0 + phi**2 / 6.0, phi / np.maximum(s, 1e-3))
    return (-np.asarray(grad) * ratio)[..., None, None] * np.eye(3)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    if isinstance(a, (float, int, np.floating)):
        w = math.fmod(float(a) + math.pi, 2.0 * math.pi)
        w = w + 2.0 * math.pi if w < 0.0 else w
        w -= math.pi
        return w + 2.0 * math.pi if w <= -math.pi else w
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


class EulerXYZ(NamedTuple):
    """Intrinsic X-Y-Z angles: ``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)``."""

    roll: float
    pitch: float
    yaw: float
    gimbal_lock: bool = False


def euler_to_mat(e) -> np.ndarray:
    x, y, z = (float(t) for t in tuple(e)[:3])
    cx, sx = np.cos(x), np.sin(x)
    cy, sy = np.cos(y), np.sin(y)
    cz, sz = np.cos(z), np.sin(z)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def mat_to_euler(m) -> EulerXYZ:
    (m00, m01, m02), (m10, m11, m12), (_, _, m22) = np.asarray(m, dtype=float).tolist()
    sy = min(max(m02, -1.0), 1.0)
    if 1.0 - abs(sy) < _GIMBAL_EPS:
        # pitch = +-pi/2: only roll +- yaw is defined; pin roll to 0
        return EulerXYZ(0.0, math.copysign(math.pi / 2, sy), wrap_angle(math.atan2(m10, m11)), True)
    return EulerXYZ(wrap_angle(math.atan2(-m12, m22)), math.asin(sy), wrap_angle(math.atan2(-m01, m00)), False)


def mean_angle(a: float, b: float) -> float:
    """Circular mean of two angles, in (-pi, pi]."""
    if abs(wrap_angle(a - b)) > np.pi - 1e-9:
        raise AmbiguousMean(f"angles {a} and {b} are antipodal")
    m = np.arctan2(np.sin(a) + np.sin(b), np.cos(a) + np.cos(b))
    return wrap_angle(m)
