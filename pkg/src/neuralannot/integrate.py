"""Merge separately annotated body, hand and face parameters into one
expressive parameter set.

The body's wrist global rotation is replaced by the 3D hand's global
rotation, and the elbow's roll absorbs half of the twist change so the
forearm does not snap. A side is accepted only when the resulting local
wrist rotation is anatomically plausible; otherwise it keeps the body
annotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotmath
from .bodymodel import N_EXPR, N_SHAPE, PART_JOINTS, KinematicModel, ModelParams, flip_hand
from .errors import AmbiguousMean, DimensionMismatch, WrongPart

PITCH_LIMIT = np.pi / 4  # |y-Euler| of the new local wrist must stay below this
YAW_LIMIT = np.pi / 2  # |z-Euler| likewise
SIDES = ("right", "left")


def _as_mat(rot) -> np.ndarray:
    rot = np.asarray(rot, dtype=float)
    if rot.shape == (3, 3):
        return rotmath.check_rotation(rot)
    if rot.shape == (3,):
        return rotmath.aa_to_mat(rot)
    raise DimensionMismatch("a hand global rotation is an axis-angle 3-vector or a 3x3 matrix")


def _global(model: KinematicModel, local: np.ndarray, j: int) -> np.ndarray:
    """World rotation of joint ``j``: product of locals along its ancestor chain."""
    G = local[j]
    j = model.parents[j]
    while j >= 0:
        G = local[j] @ G
        j = model.parents[j]
    return G


@dataclass
class SideReport:
    side: str
    accepted: bool
    wrist_euler: tuple | None = None  # (roll, pitch, yaw) of the proposed local wrist
    reason: str = ""


def _integrate_side(model: KinematicModel, local: np.ndarray, side: str, hand_global: np.ndarray):
    elbow = int(model.role(f"{side}_elbow"))
    wrist = int(model.role(f"{side}_wrist"))
    G_elbow = _global(model, local, elbow)
    G_up = _global(model, local, model.parents[elbow])
    e = rotmath.mat_to_euler(G_elbow)
    w = rotmath.mat_to_euler(_global(model, local, wrist))
    h = rotmath.mat_to_euler(hand_global)
    # roll the elbow halfway toward the twist the hand asks for
    try:
        roll = rotmath.mean_angle(e.roll, e.roll + rotmath.wrap_angle(h.roll - w.roll))
    except AmbiguousMean:
        roll = e.roll
    if roll == e.roll:
        E = G_elbow
    else:
        E = rotmath.euler_to_mat((roll, e.pitch, e.yaw))
    new_local = local.copy()
    new_local[elbow] = G_up.T @ E
    new_local[wrist] = _global(model, new_local, model.parents[wrist]).T @ hand_global
    lw = rotmath.mat_to_euler(new_local[wrist])
    euler = (lw.roll, lw.pitch, lw.yaw)
    if abs(lw.pitch) >= PITCH_LIMIT or abs(lw.yaw) >= YAW_LIMIT:
        return None, SideReport(side, False, euler, "implausible local wrist")
    return (elbow, wrist, new_local), SideReport(side, True, euler)


def integrate_body_hands(model: KinematicModel, body: ModelParams, rhand_global=None, lhand_global=None):
    """Return ``(body', reports)``.

    ``rhand_global`` / ``lhand_global`` are world-frame hand rotations (left
    already mirrored back into the body's convention); ``None`` skips a side.
    Only elbow and wrist rotations can change; all other entries are copied.
    """
    if body.part != "body":
        raise WrongPart(f"expected body parameters, got {body.part}")
    out = body.copy()
    reports = []
    local = None
    for side, hg in zip(SIDES, (rhand_global, lhand_global)):
        if hg is None:
            continue
        if local is None:
            local = rotmath.aa_to_mat(out.pose)
        res, rep = _integrate_side(model, local, side, _as_mat(hg))
        reports.append(rep)
        if res is None:
            continue
        elbow, wrist, new_local = res
        for j in (elbow, wrist):
            # unchanged rotations keep their exact axis-angle entries
            if np.abs(new_local[j] - local[j]).max() > 1e-13:
                out.joint_rots[j - 1] = rotmath.mat_to_aa(new_local[j])
                local[j] = rotmath.aa_to_mat(out.joint_rots[j - 1])
    return out, reports


@dataclass
class ExpressiveParams:
    """Whole-body parameters: body, both hands (right-hand convention for
    their joints as annotated), jaw and expression."""

    global_rot: np.ndarray  # (3,)
    body_pose: np.ndarray  # (21, 3)
    betas: np.ndarray  # (10,)
    rhand_pose: np.ndarray  # (15, 3)
    lhand_pose: np.ndarray  # (15, 3)
    jaw: np.ndarray  # (3,)
    expression: np.ndarray  # (10,)

    SIZES = (("global_rot", 3), ("body_pose", 63), ("betas", N_SHAPE), ("rhand_pose", 45),
             ("lhand_pose", 45), ("jaw", 3), ("expression", N_EXPR))

    def __post_init__(self):
        for name, n in self.SIZES:
            v = np.asarray(getattr(self, name), dtype=float)
            if v.size != n:
                raise DimensionMismatch(f"{name} needs {n} values, got {v.size}")
            setattr(self, name, v.reshape(-1, 3) if name.endswith("pose") else v.reshape(-1))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, name)) for name, _ in self.SIZES])

    @classmethod
    def from_vector(cls, v) -> ExpressiveParams:
        v = np.asarray(v, dtype=float)
        total = sum(n for _, n in cls.SIZES)
        if v.shape != (total,):
            raise DimensionMismatch(f"expressive vector must have {total} entries")
        parts, k = {}, 0
        for name, n in cls.SIZES:
            parts[name] = v[k:k + n]
            k += n
        return cls(**parts)

    def to_dict(self) -> dict:
        return {name: np.ravel(getattr(self, name)).tolist() for name, _ in self.SIZES}

    @classmethod
    def from_dict(cls, d: dict) -> ExpressiveParams:
        return cls(**{name: d[name] for name, _ in cls.SIZES})


def assemble_expressive(model_b: KinematicModel, body: ModelParams, rhand: ModelParams | None = None,
                        lhand: ModelParams | None = None, face: ModelParams | None = None,
                        lhand_mirrored: bool = True):
    """Integrate the hands into the body and concatenate every part.

    ``lhand`` is expected as annotated by a right-hand model on a mirrored
    image (``lhand_mirrored``), so it is flipped back before use. Returns
    ``(ExpressiveParams, reports)``.
    """
    for p, want in ((body, "body"), (rhand, "hand"), (lhand, "hand"), (face, "face")):
        if p is not None and p.part != want:
            raise WrongPart(f"expected {want} parameters, got {p.part}")
    if lhand is not None and lhand_mirrored:
        lhand = flip_hand(lhand)
    body2, reports = integrate_body_hands(model_b, body,
                                          None if rhand is None else rhand.global_rot,
                                          None if lhand is None else lhand.global_rot)
    n_hand = PART_JOINTS["hand"] - 1
    zeros_hand = np.zeros((n_hand, 3))
    expressive = ExpressiveParams(
        body2.global_rot,
        body2.joint_rots,
        body2.betas,
        zeros_hand if rhand is None else rhand.joint_rots,
        zeros_hand if lhand is None else lhand.joint_rots,
        np.zeros(3) if face is None else face.joint_rots[0],
        np.zeros(N_EXPR) if face is None else face.expression,
    )
    return expressive, reports
