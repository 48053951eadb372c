"""Weak-perspective projection and closed-form point-set alignment."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DegenerateConfiguration


class Extrinsics(NamedTuple):
    R: np.ndarray
    t: np.ndarray


def project(points3d, camera) -> np.ndarray:
    """Orthographic drop of z, uniform scale ``s``, pixel shift ``(tx, ty)``.

    ``camera`` is ``(s, tx, ty)``; batched inputs broadcast over leading axes.
    """
    points3d = np.asarray(points3d, dtype=float)
    camera = np.asarray(camera, dtype=float)
    s = camera[..., 0][..., None, None]
    t = camera[..., None, 1:3]
    return s * points3d[..., :2] + t


def project_vjp(points3d, camera, grad_2d):
    """Gradients of ``project`` w.r.t. the 3D points and the camera."""
    points3d = np.asarray(points3d, dtype=float)
    camera = np.asarray(camera, dtype=float)
    s = camera[..., 0][..., None, None]
    g3 = np.zeros_like(points3d)
    g3[..., :2] = s * grad_2d
    gs = np.sum(grad_2d * points3d[..., :2], axis=(-2, -1))
    gt = np.sum(grad_2d, axis=-2)
    return g3, np.concatenate([gs[..., None], gt], axis=-1)


def _centered_svd(P, Q):
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise DegenerateConfiguration(f"point sets must both be (M, 3), got {P.shape} and {Q.shape}")
    if len(P) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    H = Pc.T @ Qc
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], 1e-300)
    if S[1] < 1e-10 * scale or S[0] < 1e-14:
        raise DegenerateConfiguration("point configuration is collinear or coincident")
    # determinant fix on the smallest singular direction
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, S, D, Pc, mp, mq


def init_extrinsics_svd(model_pts, target_pts) -> Extrinsics:
    """Rigid least-squares alignment (Kabsch): ``target ~ R @ model + t``."""
    R, _, _, _, mp, mq = _centered_svd(model_pts, target_pts)
    return Extrinsics(R, mq - R @ mp)


def similarity_align(P, Q):
    """Least-squares similarity ``Q ~ s R P + t`` (Umeyama); returns ``(s, R, t)``."""
    R, S, D, Pc, mp, mq = _centered_svd(P, Q)
    var = np.sum(Pc * Pc)
    s = float(np.sum(S * np.diag(D)) / var)
    return s, R, mq - s * R @ mp
