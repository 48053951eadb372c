"""Parametric skinned articulated model (body / hand / face).

The model is linear blend skinning over a kinematic tree with linear shape and
expression blendshapes. Every output point (a mesh vertex or an evaluation
joint) is written in the collapsed form

    out_k = sum_j  G_j @ D_kj(beta, psi) + C_kj * b_j

where ``G_j, b_j`` are the rigid transform of joint ``j`` and ``C, D`` are
precomputed from skinning weights, blendshapes and (for evaluation joints) the
external regressor. This lets training and fitting evaluate 17 joints without
skinning the full mesh, and gives a single hand-written reverse pass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import rotmath
from .errors import DimensionMismatch, WrongPart

FORMAT_NAME = "neuralannot.model"
FORMAT_VERSION = 1

N_SHAPE = 10
N_EXPR = 10
N_CAMERA = 3
# number of joints including the global/root joint
PART_JOINTS = {"body": 22, "hand": 16, "face": 2}


@dataclass(eq=False)
class KinematicModel:
    part_kind: str
    template: np.ndarray  # (N, 3) meters
    parents: np.ndarray  # (J,), parents[0] == -1
    shape_basis: np.ndarray  # (N, 3, 10)
    expression_basis: np.ndarray  # (N, 3, 10)
    skin_weights: np.ndarray  # (N, J)
    joint_regressor: np.ndarray  # (J, N)
    external_regressor: np.ndarray  # (K, N)
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    joint_names: list = field(default_factory=list)
    eval_names: list = field(default_factory=list)
    roles: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=float)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=float)
        self.expression_basis = np.asarray(self.expression_basis, dtype=float)
        self.skin_weights = np.asarray(self.skin_weights, dtype=float)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=float)
        self.external_regressor = np.asarray(self.external_regressor, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        for arr in (self.template, self.shape_basis, self.expression_basis, self.skin_weights,
                    self.joint_regressor, self.external_regressor, self.faces, self.parents):
            arr.setflags(write=False)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_verts(self) -> int:
        return len(self.template)

    @property
    def n_eval(self) -> int:
        return len(self.external_regressor)

    @cached_property
    def order(self) -> np.ndarray:
        """Joint indices in parent-before-child order."""
        return _topological_order(self.parents)

    @cached_property
    def _rest_terms(self):
        JT = self.joint_regressor @ self.template
        JS = np.einsum("jn,ncs->jcs", self.joint_regressor, self.shape_basis)
        JE = np.einsum("jn,ncs->jcs", self.joint_regressor, self.expression_basis)
        return JT, JS, JE

    @cached_property
    def _eval_terms(self):
        X, W = self.external_regressor, self.skin_weights
        C = X @ W
        D0 = np.einsum("kn,nj,nc->kjc", X, W, self.template)
        DS = np.einsum("kn,nj,ncs->kjcs", X, W, self.shape_basis)
        DE = np.einsum("kn,nj,ncs->kjcs", X, W, self.expression_basis)
        return C, D0, DS, DE

    @cached_property
    def _vertex_terms(self):
        W = self.skin_weights
        D0 = W[:, :, None] * self.template[:, None, :]
        DS = W[:, :, None, None] * self.shape_basis[:, None]
        DE = W[:, :, None, None] * self.expression_basis[:, None]
        return W, D0, DS, DE

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ``ValueError`` if any structural invariant is violated."""
        N, J = self.n_verts, self.n_joints
        if self.part_kind not in PART_JOINTS:
            raise ValueError(f"unknown part kind {self.part_kind!r}")
        if J != PART_JOINTS[self.part_kind]:
            raise ValueError(f"{self.part_kind} model needs {PART_JOINTS[self.part_kind]} joints, has {J}")
        _topological_order(self.parents)
        shapes = {
            "template": (self.template.shape, (N, 3)),
            "shape_basis": (self.shape_basis.shape, (N, 3, N_SHAPE)),
            "expression_basis": (self.expression_basis.shape, (N, 3, N_EXPR)),
            "skin_weights": (self.skin_weights.shape, (N, J)),
            "joint_regressor": (self.joint_regressor.shape, (J, N)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        if self.external_regressor.shape[1] != N:
            raise ValueError("external_regressor column count must equal vertex count")
        for name in ("skin_weights", "joint_regressor", "external_regressor"):
            arr = getattr(self, name)
            if arr.min() < 0 or np.abs(arr.sum(axis=1) - 1.0).max() > tol:
                raise ValueError(f"{name} rows must be non-negative and sum to 1")
        if self.part_kind != "face" and np.any(self.expression_basis != 0):
            raise ValueError("expression basis must be zero for non-face parts")

    def role(self, name: str):
        from .errors import MissingJointRole

        try:
            return self.roles[name]
        except KeyError:
            raise MissingJointRole(name) from None

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(model_to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


def _topological_order(parents) -> np.ndarray:
    parents = np.asarray(parents)
    J = len(parents)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1 or roots[0] != 0:
        raise ValueError("kinematic tree must have exactly one root at index 0")
    children = [[] for _ in range(J)]
    for j, p in enumerate(parents):
        if j == 0:
            continue
        if not 0 <= p < J:
            raise ValueError(f"joint {j} has invalid parent {p}")
        children[p].append(j)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != J:
        raise ValueError("parent array contains a cycle")
    return np.array(order, dtype=np.int64)


# ----------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """One parameter set: rotations are axis-angle, camera is (s, tx, ty)."""

    part: str
    global_rot: np.ndarray
    joint_rots: np.ndarray
    betas: np.ndarray
    expression: np.ndarray
    camera: np.ndarray
    latent: np.ndarray | None = None

    def __post_init__(self):
        self.global_rot = np.asarray(self.global_rot, dtype=float).reshape(3)
        self.joint_rots = np.asarray(self.joint_rots, dtype=float).reshape(-1, 3)
        self.betas = np.asarray(self.betas, dtype=float).reshape(-1)
        self.expression = np.asarray(self.expression, dtype=float).reshape(-1)
        self.camera = np.asarray(self.camera, dtype=float).reshape(-1)
        if self.latent is not None:
            self.latent = np.asarray(self.latent, dtype=float).reshape(-1)
        self.check()

    def check(self) -> None:
        if self.part not in PART_JOINTS:
            raise DimensionMismatch(f"unknown part {self.part!r}")
        want = PART_JOINTS[self.part] - 1
        if self.joint_rots.shape != (want, 3):
            raise DimensionMismatch(f"{self.part} needs {want}x3 joint rotations, got {self.joint_rots.shape}")
        if self.betas.shape != (N_SHAPE,) or self.expression.shape != (N_EXPR,):
            raise DimensionMismatch("betas and expression must be 10-vectors")
        if self.camera.shape != (N_CAMERA,):
            raise DimensionMismatch("camera must be a 3-vector (s, tx, ty)")

    @classmethod
    def zeros(cls, part: str, camera=(1.0, 0.0, 0.0)) -> ModelParams:
        J = PART_JOINTS[part]
        return cls(part, np.zeros(3), np.zeros((J - 1, 3)), np.zeros(N_SHAPE), np.zeros(N_EXPR),
                   np.asarray(camera, dtype=float))

    @property
    def pose(self) -> np.ndarray:
        """All rotations stacked, root first: (J, 3)."""
        return np.vstack([self.global_rot[None], self.joint_rots])

    def copy(self) -> ModelParams:
        return ModelParams(self.part, self.global_rot.copy(), self.joint_rots.copy(), self.betas.copy(),
                           self.expression.copy(), self.camera.copy(),
                           None if self.latent is None else self.latent.copy())

    def to_dict(self) -> dict:
        d = {
            "part": self.part,
            "global_rot": self.global_rot.tolist(),
            "joint_rots": self.joint_rots.tolist(),
            "betas": self.betas.tolist(),
            "expression": self.expression.tolist(),
            "camera": self.camera.tolist(),
        }
        if self.latent is not None:
            d["latent"] = self.latent.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelParams:
        return cls(d["part"], d["global_rot"], d["joint_rots"], d["betas"],
                   d.get("expression", [0.0] * N_EXPR), d.get("camera", [1.0, 0.0, 0.0]), d.get("latent"))


def flip_hand(params: ModelParams) -> ModelParams:
    """Mirror a hand across the x = 0 plane (right <-> left)."""
    if params.part != "hand":
        raise WrongPart(f"flip_hand expects a hand, got {params.part}")
    out = params.copy()
    flip = np.array([1.0, -1.0, -1.0])
    out.global_rot = out.global_rot * flip
    out.joint_rots = out.joint_rots * flip
    return out


# ----------------------------------------------------------------------------
# forward pieces


class JointGlobals(NamedTuple):
    rots: np.ndarray  # (..., J, 3, 3)
    positions: np.ndarray  # (..., J, 3)
    transl: np.ndarray  # (..., J, 3) so that x -> rots @ x + transl


class PosedOutput(NamedTuple):
    vertices: np.ndarray
    joints3d: np.ndarray
    joint_globals: JointGlobals


def _check_coeffs(model: KinematicModel, betas, expression):
    betas = np.zeros(N_SHAPE) if betas is None else np.asarray(betas, dtype=float)
    expression = np.zeros(N_EXPR) if expression is None else np.asarray(expression, dtype=float)
    if betas.shape[-1] != N_SHAPE or expression.shape[-1] != N_EXPR:
        raise DimensionMismatch("betas and expression must have 10 coefficients")
    return betas, expression


def shape_rest(model: KinematicModel, betas=None, expression=None):
    """Rest-pose vertices and joints after applying blendshapes."""
    betas, expression = _check_coeffs(model, betas, expression)
    verts = (model.template
             + np.einsum("ncs,...s->...nc", model.shape_basis, betas)
             + np.einsum("ncs,...s->...nc", model.expression_basis, expression))
    joints = np.einsum("jn,...nc->...jc", model.joint_regressor, verts)
    return verts, joints


def _fk(parents, order, R, Jr):
    G = np.empty_like(R)
    p = np.empty_like(Jr)
    root = order[0]
    G[..., root, :, :] = R[..., root, :, :]
    p[..., root, :] = Jr[..., root, :]
    eye = np.eye(3)
    for j in order[1:]:
        q = parents[j]
        G[..., j, :, :] = G[..., q, :, :] @ R[..., j, :, :]
        # p_q + G_q (Jr_j - Jr_q), arranged so identity rotations reproduce Jr exactly
        bend = np.einsum("...cd,...d->...c", G[..., q, :, :] - eye, Jr[..., j, :] - Jr[..., q, :])
        p[..., j, :] = Jr[..., j, :] + (p[..., q, :] - Jr[..., q, :]) + bend
    return G, p


def forward_kinematics(model: KinematicModel, global_rot, joint_rots, rest_joints) -> JointGlobals:
    """Compose local axis-angle rotations down the tree about rest-joint pivots."""
    pose = np.concatenate([np.asarray(global_rot, dtype=float)[..., None, :],
                           np.asarray(joint_rots, dtype=float)], axis=-2)
    if pose.shape[-2] != model.n_joints:
        raise DimensionMismatch(f"expected {model.n_joints} rotations, got {pose.shape[-2]}")
    R = rotmath.aa_to_mat(pose)
    rest_joints = np.asarray(rest_joints, dtype=float)
    G, p = _fk(model.parents, model.order, R, rest_joints)
    b = p - np.einsum("...jcd,...jd->...jc", G, rest_joints)
    return JointGlobals(G, p, b)


def local_from_global(model: KinematicModel, global_rots):
    """Invert forward kinematics on rotations: returns ``(global_rot, joint_rots)``."""
    G = rotmath.check_rotation(global_rots)
    L = np.empty_like(G)
    L[..., 0, :, :] = G[..., 0, :, :]
    for j in range(1, model.n_joints):
        q = model.parents[j]
        L[..., j, :, :] = np.swapaxes(G[..., q, :, :], -1, -2) @ G[..., j, :, :]
    aa = rotmath.mat_to_aa(L)
    return aa[..., 0, :], aa[..., 1:, :]


def skin(model: KinematicModel, rest_vertices, joint_globals: JointGlobals) -> np.ndarray:
    """Linear blend skinning of rest vertices by per-joint rigid transforms."""
    G, _, b = joint_globals
    per_joint = np.einsum("...jcd,...nd->...njc", G, rest_vertices) + b[..., None, :, :]
    return np.einsum("nj,...njc->...nc", model.skin_weights, per_joint)


def model_forward(model: KinematicModel, params: ModelParams) -> PosedOutput:
    if params.joint_rots.shape[0] != model.n_joints - 1:
        raise DimensionMismatch("parameter set does not match the model's joint count")
    verts, joints = shape_rest(model, params.betas, params.expression)
    globals_ = forward_kinematics(model, params.global_rot, params.joint_rots, joints)
    posed = skin(model, verts, globals_)
    return PosedOutput(posed, model.external_regressor @ posed, globals_)


# ----------------------------------------------------------------------------
# differentiable batched layer


class ModelLayer:
    """Batched forward/reverse pass from rotation matrices and coefficients.

    ``forward`` takes ``rots`` of shape (B, J, 3, 3), ``betas`` and ``expr`` of
    shape (B, 10), and returns evaluation joints (B, K, 3) or, with
    ``vertices=True``, skinned vertices (B, N, 3).
    """

    def __init__(self, model: KinematicModel):
        self.model = model
        self.parents = model.parents
        self.order = model.order

    def forward(self, rots, betas, expr, vertices: bool = False):
        m = self.model
        JT, JS, JE = m._rest_terms
        C, D0, DS, DE = m._vertex_terms if vertices else m._eval_terms
        B = len(rots)
        J = m.n_joints
        K = len(C)
        face = m.part_kind == "face"
        Jr = JT + (betas @ JS.reshape(-1, N_SHAPE).T).reshape(B, J, 3)
        if face:
            Jr = Jr + (expr @ JE.reshape(-1, N_EXPR).T).reshape(B, J, 3)
        G, p = _fk(self.parents, self.order, rots, Jr)
        b = p - (G @ Jr[..., None])[..., 0]
        # D[b, k, (j, d)]: blended rest offsets per bone
        D = D0.reshape(1, K, J * 3) + (betas @ DS.reshape(-1, N_SHAPE).T).reshape(B, K, J * 3)
        if face:
            D = D + (expr @ DE.reshape(-1, N_EXPR).T).reshape(B, K, J * 3)
        Gt = np.swapaxes(G, -1, -2).reshape(B, J * 3, 3)  # [(j, d), c]
        out = D @ Gt + C @ b
        cache = (rots, Jr, G, D, vertices)
        return out, cache

    def backward(self, cache, grad_out):
        m = self.model
        rots, Jr, G, D, vertices = cache
        JT, JS, JE = m._rest_terms
        C, D0, DS, DE = m._vertex_terms if vertices else m._eval_terms
        B = len(rots)
        J = m.n_joints
        face = m.part_kind == "face"

        gT = np.swapaxes(grad_out, -1, -2)  # (B, 3, K)
        gG = np.swapaxes((gT @ D).reshape(B, 3, J, 3), 1, 2).copy()  # [b, j, c, d]
        Gc = np.swapaxes(G, 1, 2).reshape(B, 3, J * 3)  # [b, c, (j, d)]
        gD = (grad_out @ Gc).reshape(B, -1)
        gb = C.T @ grad_out
        g_betas = gD @ DS.reshape(-1, N_SHAPE)
        g_expr = gD @ DE.reshape(-1, N_EXPR) if face else np.zeros_like(g_betas)

        # b = p - G Jr
        gp = gb.copy()
        gG -= gb[..., :, None] * Jr[..., None, :]
        gJr = -(np.swapaxes(G, -1, -2) @ gb[..., None])[..., 0]

        gR = np.zeros_like(rots)
        for j in self.order[:0:-1]:
            q = self.parents[j]
            Gq = G[:, q]
            gG[:, q] += gG[:, j] @ np.swapaxes(rots[:, j], -1, -2)
            gR[:, j] += np.swapaxes(Gq, -1, -2) @ gG[:, j]
            d = Jr[:, j] - Jr[:, q]
            gp[:, q] += gp[:, j]
            gG[:, q] += gp[:, j][:, :, None] * d[:, None, :]
            gd = (np.swapaxes(Gq, -1, -2) @ gp[:, j][..., None])[..., 0]
            gJr[:, j] += gd
            gJr[:, q] -= gd
        root = self.order[0]
        gR[:, root] += gG[:, root]
        gJr[:, root] += gp[:, root]

        gJr = gJr.reshape(B, -1)
        g_betas += gJr @ JS.reshape(-1, N_SHAPE)
        if face:
            g_expr += gJr @ JE.reshape(-1, N_EXPR)
        return gR, g_betas, g_expr


def forward_from_aa(layer: ModelLayer, pose_aa, betas, expr, vertices: bool = False):
    """Convenience wrapper taking stacked axis-angle ``(B, J, 3)``."""
    rots = rotmath.aa_to_mat(pose_aa)
    out, cache = layer.forward(rots, betas, expr, vertices)
    return out, (pose_aa, cache)


def backward_from_aa(layer: ModelLayer, cache, grad_out):
    pose_aa, inner = cache
    gR, gb, ge = layer.backward(inner, grad_out)
    return rotmath.aa_to_mat_vjp(pose_aa, gR), gb, ge


def eval_joints(model: KinematicModel, params_list) -> np.ndarray:
    """Evaluation joints for a list of parameter sets, shape (B, K, 3)."""
    layer = ModelLayer(model)
    pose = np.stack([p.pose for p in params_list])
    betas = np.stack([p.betas for p in params_list])
    expr = np.stack([p.expression for p in params_list])
    out, _ = layer.forward(rotmath.aa_to_mat(pose), betas, expr)
    return out


# ----------------------------------------------------------------------------
# files


def model_to_dict(model: KinematicModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "part_kind": model.part_kind,
        "seed": model.seed,
        "template": model.template.tolist(),
        "parents": model.parents.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "expression_basis": model.expression_basis.tolist(),
        "skin_weights": model.skin_weights.tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "external_regressor": model.external_regressor.tolist(),
        "faces": model.faces.tolist(),
        "joint_names": list(model.joint_names),
        "eval_names": list(model.eval_names),
        "roles": model.roles,
    }


def model_from_dict(d: dict) -> KinematicModel:
    if d.get("format") != FORMAT_NAME:
        raise ValueError(f"not a model file (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model file version {d.get('version')}")
    return KinematicModel(
        part_kind=d["part_kind"],
        template=d["template"],
        parents=d["parents"],
        shape_basis=d["shape_basis"],
        expression_basis=d["expression_basis"],
        skin_weights=d["skin_weights"],
        joint_regressor=d["joint_regressor"],
        external_regressor=d["external_regressor"],
        faces=d.get("faces", []),
        joint_names=d.get("joint_names", []),
        eval_names=d.get("eval_names", []),
        roles=d.get("roles", {}),
        seed=d.get("seed"),
    )


def save_model(model: KinematicModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> KinematicModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    return np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3)
