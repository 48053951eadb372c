"""The learned annotator: a regressor from image features (and, on datasets
with 3D ground truth, the 3D pose itself) to model parameters, its two
training losses, and the end-to-end annotation procedure.

Stage one trains a fresh network per auxiliary dataset on its 3D joints and
annotates that dataset. Stage two trains a fresh image-only network on the
target dataset's 2D joints, mixing in the annotated auxiliary samples (3D
joints plus parameter supervision), and annotates the target dataset. Poses
of the image-only head live in a PCA subspace learned from the stage-one
pseudo ground truth.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rotmath
from .bodymodel import N_EXPR, N_SHAPE, KinematicModel, ModelLayer, ModelParams
from .camera import project, project_vjp
from .dataset import Dataset
from .errors import DimensionMismatch, EmptyDataset, MissingPseudoGT
from .nn import MLP
from .optim import Adam, PlateauScheduler
from .priors import DEFAULT_LATENT_DIM, LossWeights, PcaEmbedding, fit_pca
from .synthdata import IMAGE_SIZE, p2d_descriptor

CHECKPOINT_FORMAT = "neuralannot.checkpoint"
CHECKPOINT_VERSION = 1

_IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
_P3D_SCALE = {"body": 2.0, "hand": 10.0, "face": 10.0}
_CAM_SCALE = {"body": 0.8 * IMAGE_SIZE / 2.0, "hand": 0.8 * IMAGE_SIZE / 0.25, "face": 0.8 * IMAGE_SIZE / 0.25}


@dataclass
class NetConfig:
    part: str
    n_joints: int
    n_eval: int
    feature_dim: int
    latent_dim: int = 0
    hidden: int = 256
    pose_dim: int = 512
    input_kind: str = "feature"  # "feature" (image descriptor) or "p2d" (2D joints only)
    cam_scale: float = 100.0  # pixels per meter at zero camera output
    p3d_scale: float = 2.0  # multiplier on root-relative 3D input (meters)
    root: int = 0  # evaluation joint that anchors root-relative 3D comparisons
    canon_idx: list = field(default_factory=list)  # eval joints that fix the 3D input's frame
    canon_ref: list = field(default_factory=list)  # their rest positions, (len(canon_idx), 3)
    parents: list = field(default_factory=list)  # kinematic tree, parents[0] = -1
    dtype: str = "float32"  # network weights and activations; losses stay float64

    def __post_init__(self):
        if self.input_kind not in ("feature", "p2d"):
            raise ValueError("input_kind must be 'feature' or 'p2d'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        self.canon_idx = [int(i) for i in self.canon_idx]
        self.canon_ref = np.asarray(self.canon_ref, dtype=float).reshape(-1, 3).tolist()
        self.parents = [int(q) for q in self.parents]
        if len(self.parents) != self.n_joints:
            raise DimensionMismatch("parents must list one entry per joint")

    @property
    def input_dim(self) -> int:
        return self.feature_dim if self.input_kind == "feature" else 3 * self.n_eval

    @property
    def face(self) -> bool:
        return self.part == "face"

    @property
    def aux_out(self) -> int:
        return 6 * self.n_joints + N_SHAPE + 3 + (N_EXPR if self.face else 0)

    @property
    def tg_out(self) -> int:
        return 6 + self.latent_dim + N_SHAPE + 3 + (N_EXPR if self.face else 0)

    @classmethod
    def for_model(cls, model: KinematicModel, feature_dim: int, **kw) -> NetConfig:
        kw.setdefault("cam_scale", _CAM_SCALE[model.part_kind])
        kw.setdefault("p3d_scale", _P3D_SCALE[model.part_kind])
        kw.setdefault("root", int(model.roles.get("root_eval_joint", 0)))
        if "canon_idx" not in kw:
            idx = sorted({kw["root"], *model.roles.get("init_eval_joints", [])})
            rest, _ = ModelLayer(model).forward(np.eye(3)[None].repeat(model.n_joints, 0)[None],
                                                np.zeros((1, N_SHAPE)), np.zeros((1, N_EXPR)))
            kw["canon_idx"], kw["canon_ref"] = idx, rest[0, idx]
        kw.setdefault("parents", model.parents.tolist())
        return cls(model.part_kind, model.n_joints, model.n_eval, feature_dim, **kw)


class RegressorNet:
    """Feature trunk, 3D-pose branch and two parameter heads.

    ``head_aux`` reads the trunk and pose-branch features and emits a 6D
    rotation per joint (global first), shape, camera (and expression for
    faces). ``head_tg`` reads the trunk only and emits a global 6D rotation,
    a pose latent code, shape, camera (and expression).
    """

    def __init__(self, cfg: NetConfig, embedding: PcaEmbedding | None = None, seed: int = 0):
        self.cfg = cfg
        self.embedding = embedding
        if embedding is not None and embedding.dim != cfg.latent_dim:
            raise DimensionMismatch("embedding dimension must equal the configured latent size")
        self.trunk = MLP("trunk", [cfg.input_dim, cfg.hidden, cfg.hidden], final_relu=True)
        self.pose_branch = MLP("pose", [4 * cfg.n_eval, cfg.pose_dim, cfg.pose_dim], final_relu=True)
        self.head_aux = MLP("head_aux", [cfg.hidden + cfg.pose_dim + 4 * cfg.n_eval, cfg.aux_out])
        self.head_tg = MLP("head_tg", [cfg.hidden, cfg.tg_out])
        rng = np.random.default_rng(seed)
        self.params: dict = {}
        self.trunk.init(self.params, rng)
        self.pose_branch.init(self.params, rng)
        self.head_aux.init(self.params, rng, last_gain=0.01)
        self.head_tg.init(self.params, rng, last_gain=0.01)
        J = cfg.n_joints
        self.params["head_aux0.b"][: 6 * J] = np.tile(_IDENTITY_6D, J)
        self.params["head_tg0.b"][:6] = _IDENTITY_6D
        for k in self.params:
            self.params[k] = self.params[k].astype(cfg.dtype)

    # -- inputs --------------------------------------------------------------

    def image_input(self, feature, p2d, vis2d) -> np.ndarray:
        if self.cfg.input_kind == "feature":
            x = np.asarray(feature, dtype=float)
        else:
            x = np.stack([p2d_descriptor(p, v) for p, v in zip(p2d, vis2d)])
        if x.shape[-1] != self.cfg.input_dim:
            raise DimensionMismatch(f"network expects {self.cfg.input_dim} input features, got {x.shape[-1]}")
        return x.astype(self.cfg.dtype)

    def pose_input(self, p3d, vis3d):
        """Network input for a 3D pose and the frame it was expressed in.

        The pose is made root-relative and rotated into the frame found by a
        rigid fit of the rest-pose reference joints, so the network sees
        every pose from a canonical heading. Returns ``(x, R0)``.
        """
        p3d = np.asarray(p3d, dtype=float)
        vis = np.asarray(vis3d, dtype=bool)
        if p3d.shape[1:] != (self.cfg.n_eval, 3):
            raise DimensionMismatch(f"3D pose must be (K={self.cfg.n_eval}, 3)")
        anchor = _anchor_weights(vis, self.cfg.root)
        rel = p3d - np.einsum("bk,bkc->bc", anchor, p3d)[:, None]
        R0 = _canonical_frame(np.asarray(self.cfg.canon_ref), rel[:, self.cfg.canon_idx],
                              vis[:, self.cfg.canon_idx])
        rel = rel @ R0  # rows become R0^T (p - root)
        rel = np.where(vis[..., None], rel * self.cfg.p3d_scale, 0.0)
        x = np.concatenate([rel.reshape(len(rel), -1), vis.astype(float)], axis=1)
        return x.astype(self.cfg.dtype), R0

    # -- heads ---------------------------------------------------------------

    def run_aux(self, x_img, pose_in):
        x_pose, R0 = pose_in
        h, a_trunk = self.trunk.forward(self.params, x_img)
        q, a_pose = self.pose_branch.forward(self.params, x_pose)
        o, a_head = self.head_aux.forward(self.params, np.concatenate([h, q, x_pose], axis=1))
        o = o.astype(float)
        cfg = self.cfg
        J = cfg.n_joints
        six = o[:, : 6 * J].reshape(-1, J, 6)
        # each block is a joint's orientation in the canonical frame; local
        # rotations follow as parent^T child, so errors do not compound
        G = rotmath.sixd_to_mat(six)
        par = np.asarray(cfg.parents)
        rots = np.empty_like(G)
        rots[:, 0] = R0 @ G[:, 0]
        rots[:, 1:] = np.swapaxes(G[:, par[1:]], -1, -2) @ G[:, 1:]
        out = {
            "six": six,
            "R0": R0,
            "G": G,
            "rots": rots,
            "betas": o[:, 6 * J: 6 * J + N_SHAPE],
            "cam_raw": o[:, 6 * J + N_SHAPE: 6 * J + N_SHAPE + 3],
            "expr": o[:, 6 * J + N_SHAPE + 3:] if cfg.face else np.zeros((len(o), N_EXPR)),
        }
        out["camera"] = _camera(out["cam_raw"], cfg.cam_scale)
        return out, (a_trunk, a_pose, a_head)

    def back_aux(self, cache, out, g):
        """``g`` holds gradients w.r.t. ``rots``, ``betas``, ``camera``, ``expr``."""
        a_trunk, a_pose, a_head = cache
        cfg = self.cfg
        gL, G = g["rots"], out["G"]
        par = cfg.parents
        gG = np.zeros_like(gL)
        gG[:, 0] = np.swapaxes(out["R0"], -1, -2) @ gL[:, 0]
        gG[:, 1:] = G[:, par[1:]] @ gL[:, 1:]
        pull = G[:, 1:] @ np.swapaxes(gL[:, 1:], -1, -2)
        for j in range(1, cfg.n_joints):
            gG[:, par[j]] += pull[:, j - 1]
        g_six = rotmath.sixd_to_mat_vjp(out["six"], gG).reshape(len(gG), -1)
        g_cam = _camera_vjp(out["cam_raw"], cfg.cam_scale, g["camera"])
        parts = [g_six, g["betas"], g_cam] + ([g["expr"]] if cfg.face else [])
        grads: dict = {}
        g_o = np.concatenate(parts, axis=1).astype(cfg.dtype)
        g_in = self.head_aux.backward(self.params, a_head, g_o, grads)
        self.trunk.backward(self.params, a_trunk, g_in[:, : cfg.hidden], grads)
        self.pose_branch.backward(self.params, a_pose, g_in[:, cfg.hidden: cfg.hidden + cfg.pose_dim], grads)
        return grads

    def run_tg(self, x_img):
        if self.embedding is None:
            raise ValueError("the image-only head needs a pose embedding")
        h, a_trunk = self.trunk.forward(self.params, x_img)
        o, a_head = self.head_tg.forward(self.params, h)
        o = o.astype(float)
        cfg = self.cfg
        d = cfg.latent_dim
        z = o[:, 6: 6 + d]
        aa = (self.embedding.mean + z @ self.embedding.basis).reshape(len(o), cfg.n_joints - 1, 3)
        six = o[:, :6]
        rots = np.concatenate([rotmath.sixd_to_mat(six)[:, None], rotmath.aa_to_mat(aa)], axis=1)
        off = 6 + d
        out = {
            "six": six,
            "latent": z,
            "aa": aa,
            "rots": rots,
            "betas": o[:, off: off + N_SHAPE],
            "cam_raw": o[:, off + N_SHAPE: off + N_SHAPE + 3],
            "expr": o[:, off + N_SHAPE + 3:] if cfg.face else np.zeros((len(o), N_EXPR)),
        }
        out["camera"] = _camera(out["cam_raw"], cfg.cam_scale)
        return out, (a_trunk, a_head)

    def back_tg(self, cache, out, g):
        """``g`` holds gradients w.r.t. ``rots``, ``aa``, ``latent``, ``betas``,
        ``camera`` and ``expr``; ``aa`` and ``latent`` gradients are direct
        terms added to what flows through ``rots``."""
        a_trunk, a_head = cache
        cfg = self.cfg
        g_six = rotmath.sixd_to_mat_vjp(out["six"], g["rots"][:, 0])
        g_aa = rotmath.aa_to_mat_vjp(out["aa"], g["rots"][:, 1:]) + g.get("aa", 0.0)
        g_z = g_aa.reshape(len(g_aa), -1) @ self.embedding.basis.T + g.get("latent", 0.0)
        g_cam = _camera_vjp(out["cam_raw"], cfg.cam_scale, g["camera"])
        parts = [g_six, g_z, g["betas"], g_cam] + ([g["expr"]] if cfg.face else [])
        grads: dict = {}
        g_h = self.head_tg.backward(self.params, a_head, np.concatenate(parts, axis=1).astype(cfg.dtype), grads)
        self.trunk.backward(self.params, a_trunk, g_h, grads)
        return grads

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        """Weights to ``<path>.npz``, configuration and embedding to ``<path>.json``."""
        path = Path(path)
        base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
        np.savez(base.with_suffix(".npz"), **self.params)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "embedding": None if self.embedding is None else self.embedding.to_dict(),
            "weights": base.with_suffix(".npz").name,
        }
        base.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> RegressorNet:
        path = Path(path)
        base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
        meta = json.loads(base.with_suffix(".json").read_text())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        emb = None if meta["embedding"] is None else PcaEmbedding.from_dict(meta["embedding"])
        net = cls(NetConfig(**meta["config"]), emb)
        with np.load(base.with_suffix(".npz")) as z:
            for k in net.params:
                net.params[k] = z[k].copy()
        return net


def _camera(raw, scale):
    s = scale * np.exp(np.clip(raw[:, 0], -5.0, 5.0))
    return np.stack([s, IMAGE_SIZE / 2 + 50.0 * raw[:, 1], IMAGE_SIZE / 2 + 50.0 * raw[:, 2]], axis=1)


def _camera_vjp(raw, scale, g):
    inside = (np.abs(raw[:, 0]) < 5.0).astype(float)
    s = scale * np.exp(np.clip(raw[:, 0], -5.0, 5.0))
    return np.stack([g[:, 0] * s * inside, 50.0 * g[:, 1], 50.0 * g[:, 2]], axis=1)


def _canonical_frame(ref, pts, vis):
    """Batched weighted Kabsch rotation taking ``ref`` onto ``pts`` (both
    root-relative); identity where fewer than three points are visible."""
    w = vis.astype(float)
    n = w.sum(axis=1)
    mp = np.einsum("bk,kc->bc", w, ref) / np.maximum(n, 1)[:, None]
    mq = np.einsum("bk,bkc->bc", w, pts) / np.maximum(n, 1)[:, None]
    P = (ref[None] - mp[:, None]) * w[..., None]
    Q = pts - mq[:, None]
    H = np.swapaxes(P, 1, 2) @ Q
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, 1, 2) @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros((len(pts), 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.swapaxes(Vt, 1, 2) @ D @ np.swapaxes(U, 1, 2)
    R[n < 3] = np.eye(3)
    return R


def _anchor_weights(vis, root):
    """Root joint where visible, else the centroid of visible joints."""
    vis = np.asarray(vis, dtype=bool)
    a = np.zeros(vis.shape)
    has_root = vis[:, root]
    a[has_root, root] = 1.0
    rest = ~has_root
    if rest.any():
        v = vis[rest].astype(float)
        a[rest] = v / np.maximum(v.sum(axis=1, keepdims=True), 1.0)
    return a


def _to_params(cfg: NetConfig, out, i) -> ModelParams:
    R = out["rots"][i]
    aa = rotmath.mat_to_aa(R)
    joint = out["aa"][i] if "aa" in out else aa[1:]
    return ModelParams(cfg.part, aa[0], joint, out["betas"][i], out["expr"][i], out["camera"][i],
                       None if "latent" not in out else out["latent"][i])


def forward_aux(net: RegressorNet, feature, p3d, vis3d=None, p2d=None, vis2d=None) -> list:
    """Parameters from image features and a 3D pose (batched inputs)."""
    feature = np.atleast_2d(feature)
    p3d = np.asarray(p3d, dtype=float)
    if p3d.ndim == 2:
        p3d = p3d[None]
    vis3d = np.ones(p3d.shape[:2], dtype=bool) if vis3d is None else np.atleast_2d(vis3d)
    out, _ = net.run_aux(net.image_input(feature, p2d, vis2d), net.pose_input(p3d, vis3d))
    return [_to_params(net.cfg, out, i) for i in range(len(feature))]


def forward_tg(net: RegressorNet, feature, p2d=None, vis2d=None) -> list:
    """Parameters from image features alone (batched inputs)."""
    feature = np.atleast_2d(feature) if feature is not None else None
    out, _ = net.run_tg(net.image_input(feature, p2d, vis2d))
    return [_to_params(net.cfg, out, i) for i in range(len(out["betas"]))]


# ----------------------------------------------------------------------------
# losses


def _l1_3d(joints, p3d, vis, root):
    """Root-relative L1 over visible joints; returns (per-sample loss, grad)."""
    a = _anchor_weights(vis, root)
    visf = vis.astype(float)
    pred = joints - np.einsum("bk,bkc->bc", a, joints)[:, None]
    gt = p3d - np.einsum("bk,bkc->bc", a, p3d)[:, None]
    d = (pred - gt) * visf[..., None]
    loss = np.abs(d).sum(axis=(1, 2))
    s = np.sign(d)
    g = s - a[..., None] * s.sum(axis=1, keepdims=True)
    return loss, g


def _l1_2d(joints, camera, p2d, vis):
    proj = project(joints, camera)
    d = (proj - p2d) * vis[..., None]
    loss = np.abs(d).sum(axis=(1, 2))
    g3, g_cam = project_vjp(joints, camera, np.sign(d))
    return loss, g3, g_cam


def loss_ax_terms(layer: ModelLayer, out: dict, p3d, vis3d, weights: LossWeights, root: int = 0):
    """Per-sample 3D-joint L1 plus L2 regularizers, and gradients w.r.t. the
    head outputs (``rots``, ``betas``, ``camera``, ``expr``)."""
    joints, cache = layer.forward(out["rots"], out["betas"], out["expr"])
    data, g_j = _l1_3d(joints, p3d, vis3d, root)
    lam = weights.ax
    lp, lb, le = lam.get("pose", 0.0), lam.get("betas", 0.0), lam.get("expression", 0.0)
    rots = out["rots"]
    ang = rotmath.angle_sq_from_mat(rots[:, 1:])
    reg = lp * ang.sum(axis=1) + lb * np.sum(out["betas"] ** 2, axis=1)
    face = layer.model.part_kind == "face"
    if face:
        reg = reg + le * np.sum(out["expr"] ** 2, axis=1)
    gR, g_b, g_e = layer.backward(cache, g_j)
    gR[:, 1:] += rotmath.angle_sq_from_mat_vjp(rots[:, 1:], np.full(ang.shape, lp))
    g = {
        "rots": gR,
        "betas": g_b + 2.0 * lb * out["betas"],
        "camera": np.zeros_like(out["camera"]),
        "expr": (g_e + 2.0 * le * out["expr"]) if face else np.zeros_like(out["expr"]),
    }
    return data + reg, g, {"data3d": data, "reg": reg}


def loss_tg_terms(layer: ModelLayer, out: dict, batch: dict, weights: LossWeights, root: int = 0,
                  supervise_target: bool = False):
    """Per-sample mixed loss of the image-only head.

    Target samples (``is_target``): weighted 2D-joint L1 plus L2 regularizers,
    plus parameter L1 against their pseudo ground truth when
    ``supervise_target``. Auxiliary samples: 3D-joint L1 plus parameter L1
    against their pseudo ground truth.
    """
    is_tg = batch["is_target"].astype(float)
    is_ax = 1.0 - is_tg
    face = layer.model.part_kind == "face"
    joints, cache = layer.forward(out["rots"], out["betas"], out["expr"])

    l2d, g3_2d, g_cam = _l1_2d(joints, out["camera"], batch["p2d"], batch["vis2d"])
    l3d, g3_3d = _l1_3d(joints, batch["p3d"], batch["vis3d"], root)
    w2 = weights.w_2d
    lam = weights.tg
    lz, lb, le = lam.get("latent", 0.0), lam.get("betas", 0.0), lam.get("expression", 0.0)
    reg = lz * np.sum(out["latent"] ** 2, axis=1) + lb * np.sum(out["betas"] ** 2, axis=1)
    if face:
        reg = reg + le * np.sum(out["expr"] ** 2, axis=1)

    sup = is_ax + (is_tg if supervise_target else 0.0)
    has = batch["has_star"].astype(float)
    if np.any((sup > 0) & (has == 0)):
        raise MissingPseudoGT("a sample that needs parameter supervision has no pseudo ground truth")
    d_aa = out["aa"] - batch["aa_star"]
    d_b = out["betas"] - batch["betas_star"]
    par = np.abs(d_aa).sum(axis=(1, 2)) + np.abs(d_b).sum(axis=1)
    d_e = out["expr"] - batch["expr_star"]
    if face:
        par = par + np.abs(d_e).sum(axis=1)

    loss = is_tg * (w2 * l2d + reg) + is_ax * l3d + sup * par
    g_joints = (is_tg * w2)[:, None, None] * g3_2d + is_ax[:, None, None] * g3_3d
    gR, g_b, g_e = layer.backward(cache, g_joints)
    sup3 = sup[:, None, None]
    g = {
        "rots": gR,
        "aa": sup3 * np.sign(d_aa),
        "latent": 2.0 * lz * is_tg[:, None] * out["latent"],
        "betas": g_b + 2.0 * lb * is_tg[:, None] * out["betas"] + sup[:, None] * np.sign(d_b),
        "camera": (is_tg * w2)[:, None] * g_cam,
        "expr": (g_e + 2.0 * le * is_tg[:, None] * out["expr"] + sup[:, None] * np.sign(d_e))
        if face else np.zeros_like(out["expr"]),
    }
    return loss, g, {"data2d": l2d, "data3d": l3d, "param": par, "reg": reg}


def loss_ax(model: KinematicModel, params: list, p3d, vis3d=None, weights: LossWeights | None = None,
            root: int | None = None) -> float:
    """Mean over samples of the auxiliary-mode loss of parameter sets."""
    weights = weights or LossWeights()
    root = int(model.roles.get("root_eval_joint", 0)) if root is None else root
    p3d = np.asarray(p3d, dtype=float).reshape(len(params), model.n_eval, 3)
    vis = np.ones(p3d.shape[:2], dtype=bool) if vis3d is None else np.asarray(vis3d, bool).reshape(p3d.shape[:2])
    out = _params_out(params)
    loss, _, _ = loss_ax_terms(ModelLayer(model), out, p3d, vis, weights, root)
    return float(loss.mean())


def loss_tg(model: KinematicModel, params: list, samples: list, is_target, weights: LossWeights | None = None,
            root: int | None = None, supervise_target: bool = False) -> float:
    """Mean over samples of the image-only-mode loss of parameter sets."""
    weights = weights or LossWeights()
    root = int(model.roles.get("root_eval_joint", 0)) if root is None else root
    flags = np.broadcast_to(np.asarray(is_target, dtype=bool), (len(samples),))
    batch = _stack_batch(model, samples, flags)
    out = _params_out(params)
    loss, _, _ = loss_tg_terms(ModelLayer(model), out, batch, weights, root, supervise_target)
    return float(loss.mean())


def _params_out(params: list) -> dict:
    pose = np.stack([p.pose for p in params])
    return {
        "rots": rotmath.aa_to_mat(pose),
        "aa": pose[:, 1:],
        "latent": np.stack([p.latent if p.latent is not None else np.zeros(0) for p in params]),
        "betas": np.stack([p.betas for p in params]),
        "expr": np.stack([p.expression for p in params]),
        "camera": np.stack([p.camera for p in params]),
    }


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    plateau_factor: float = 0.1
    plateau_window: int = 10
    plateau_threshold: float = 1e-3
    plateau_smooth: int = 3
    plateau_max_decays: int = 1
    supervise_target: bool = False  # second-round training on the target's own pseudo ground truth
    input_dropout: float = 0.1  # chance of hiding each visible non-root joint from the 3D-pose input (ax mode)

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch size must be even and at least 2")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be non-negative and lr positive")
        if not 0.0 <= self.input_dropout < 1.0:
            raise ValueError("input_dropout must lie in [0, 1)")


@dataclass
class TrainResult:
    net: RegressorNet
    curve: list  # mean training loss per epoch
    lr_decays: list  # epochs after which the learning rate was reduced
    seconds: float = 0.0


def _stack_batch(model: KinematicModel, samples: list, is_target) -> dict:
    K, J = model.n_eval, model.n_joints
    n = len(samples)
    b = {
        "feature": np.stack([s.feature for s in samples]) if n else np.zeros((0, 0)),
        "p2d": np.stack([s.p2d for s in samples]) if n else np.zeros((0, K, 2)),
        "vis2d": np.stack([s.vis2d for s in samples]) if n else np.zeros((0, K), bool),
        "p3d": np.zeros((n, K, 3)),
        "vis3d": np.zeros((n, K), dtype=bool),
        "is_target": np.asarray(is_target, dtype=bool),
        "has_star": np.zeros(n, dtype=bool),
        "aa_star": np.zeros((n, J - 1, 3)),
        "betas_star": np.zeros((n, N_SHAPE)),
        "expr_star": np.zeros((n, N_EXPR)),
    }
    for i, s in enumerate(samples):
        if s.p3d is not None:
            b["p3d"][i] = s.p3d
            b["vis3d"][i] = s.vis3d
        if s.params_star is not None:
            b["has_star"][i] = True
            b["aa_star"][i] = s.params_star.joint_rots
            b["betas_star"][i] = s.params_star.betas
            b["expr_star"][i] = s.params_star.expression
    return b


def _take(batch: dict, idx) -> dict:
    return {k: v[idx] for k, v in batch.items()}


def _fit(net: RegressorNet, model: KinematicModel, head: str, target: dict | None, aux: dict | None,
         cfg: TrainConfig) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    layer = ModelLayer(model)
    opt = Adam(lr=cfg.lr)
    sched = PlateauScheduler(cfg.plateau_factor, cfg.plateau_window, cfg.plateau_threshold,
                             cfg.plateau_smooth, cfg.plateau_max_decays)
    n_tg = 0 if target is None else len(target["is_target"])
    n_ax = 0 if aux is None else len(aux["is_target"])
    both = n_tg > 0 and n_ax > 0
    lead, lead_n = (target, n_tg) if n_tg else (aux, n_ax)
    per = cfg.batch_size // 2 if both else cfg.batch_size
    curve, decays = [], []
    root = net.cfg.root
    t0 = time.perf_counter()
    aux_order = rng.permutation(n_ax) if both else None
    aux_pos = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(lead_n)
        total, count = 0.0, 0
        for start in range(0, lead_n, per):
            idx = order[start:start + per]
            batch = _take(lead, idx)
            if both:
                take = []
                while len(take) < len(idx):
                    if aux_pos >= n_ax:
                        aux_order, aux_pos = rng.permutation(n_ax), 0
                    m = min(len(idx) - len(take), n_ax - aux_pos)
                    take.extend(aux_order[aux_pos:aux_pos + m])
                    aux_pos += m
                other = _take(aux, np.asarray(take))
                batch = {k: np.concatenate([batch[k], other[k]]) for k in batch}
            x_img = net.image_input(batch["feature"], batch["p2d"], batch["vis2d"])
            if head == "ax":
                shown = batch["vis3d"]
                if cfg.input_dropout > 0:
                    # hidden joints stay supervised, teaching the net to fill in gaps
                    shown = shown & (rng.random(shown.shape) >= cfg.input_dropout)
                    shown[:, root] = batch["vis3d"][:, root]
                out, cache = net.run_aux(x_img, net.pose_input(batch["p3d"], shown))
                loss, g, _ = loss_ax_terms(layer, out, batch["p3d"], batch["vis3d"], cfg.weights, root)
                grads = net.back_aux(cache, out, _scale(g, len(loss)))
            else:
                out, cache = net.run_tg(x_img)
                loss, g, _ = loss_tg_terms(layer, out, batch, cfg.weights, root, cfg.supervise_target)
                grads = net.back_tg(cache, out, _scale(g, len(loss)))
            opt.step(net.params, grads)
            total += float(loss.sum())
            count += len(loss)
        curve.append(total / max(count, 1))
        if sched.step(curve[-1]):
            opt.lr *= cfg.plateau_factor
            decays.append(epoch)
    return TrainResult(net, curve, decays, time.perf_counter() - t0)


def _scale(g: dict, n: int) -> dict:
    return {k: v / n for k, v in g.items()}


def train(net: RegressorNet, model: KinematicModel, datasets: list, mode: str,
          cfg: TrainConfig | None = None) -> TrainResult:
    """Train ``net`` in place.

    ``mode="ax"``: every dataset must be auxiliary (3D joints); the 3D-pose
    head is trained on their union. ``mode="tg"``: datasets of kind
    ``target`` supply 2D supervision, annotated auxiliary datasets supply 3D
    and parameter supervision; with both present each mini-batch is half
    target and half auxiliary.
    """
    cfg = cfg or TrainConfig()
    datasets = [d.training_view() for d in datasets]
    if mode == "ax":
        samples = [s for d in datasets for s in d.samples]
        if any(d.kind != "aux" for d in datasets):
            raise ValueError("auxiliary-mode training needs auxiliary datasets")
        if not samples:
            raise EmptyDataset("no training samples")
        return _fit(net, model, "ax", None, _stack_batch(model, samples, np.zeros(len(samples), bool)), cfg)
    if mode != "tg":
        raise ValueError("mode must be 'ax' or 'tg'")
    tg = [s for d in datasets if d.kind == "target" for s in d.samples]
    ax = [s for d in datasets if d.kind == "aux" for s in d.samples]
    if not tg and not ax:
        raise EmptyDataset("no training samples")
    if any(s.params_star is None for s in ax):
        raise MissingPseudoGT("auxiliary samples need pseudo ground truth for image-only training")
    target = _stack_batch(model, tg, np.ones(len(tg), bool)) if tg else None
    aux = _stack_batch(model, ax, np.zeros(len(ax), bool)) if ax else None
    return _fit(net, model, "tg", target, aux, cfg)


def annotate_dataset(net: RegressorNet, dataset: Dataset, mode: str | None = None, batch_size: int = 1) -> Dataset:
    """Attach a pseudo ground truth to every sample (order and count preserved).

    ``mode`` defaults to ``"ax"`` for auxiliary datasets and ``"tg"`` otherwise.
    """
    mode = mode or ("ax" if dataset.kind == "aux" else "tg")
    samples = dataset.samples
    params: list = []
    for start in range(0, len(samples), max(1, batch_size)):
        chunk = samples[start:start + batch_size]
        feat = np.stack([s.feature for s in chunk])
        p2d = np.stack([s.p2d for s in chunk])
        vis2d = np.stack([s.vis2d for s in chunk])
        if mode == "ax":
            params.extend(forward_aux(net, feat, np.stack([s.p3d for s in chunk]),
                                      np.stack([s.vis3d for s in chunk]), p2d, vis2d))
        else:
            params.extend(forward_tg(net, feat, p2d, vis2d))
    return dataset.with_params(params)


# ----------------------------------------------------------------------------
# end to end


@dataclass
class AnnotationRun:
    aux: list  # annotated auxiliary datasets
    target: Dataset  # annotated target dataset
    net: RegressorNet  # the image-only network of the final stage
    embedding: PcaEmbedding
    timings: dict  # seconds: train / test per stage, and totals
    curves: dict


def pose_embedding(model: KinematicModel, aux_star: list, latent_dim: int | None = None) -> PcaEmbedding:
    """PCA pose subspace of the pseudo ground truth of annotated datasets."""
    poses = np.stack([s.params_star.joint_rots.reshape(-1) for d in aux_star for s in d.samples])
    d = DEFAULT_LATENT_DIM[model.part_kind] if latent_dim is None else latent_dim
    d = min(d, poses.shape[1], len(poses) - 1)
    return fit_pca(poses, d)


def neural_annotation(model: KinematicModel, aux_list: list, target: Dataset, ax_cfg: TrainConfig | None = None,
                      tg_cfg: TrainConfig | None = None, latent_dim: int | None = None,
                      input_kind: str = "feature", aux_in_target=None, seed: int = 0,
                      hidden: int = 256, test_batch_size: int = 1) -> AnnotationRun:
    """Annotate every auxiliary dataset, then the target dataset.

    ``aux_in_target`` selects which annotated auxiliary datasets join the
    image-only training (default all; an empty list gives a 2D-only run).
    The pose embedding is always learned from every annotated auxiliary set.
    """
    if not aux_list:
        raise EmptyDataset("at least one auxiliary dataset is needed to learn the pose embedding")
    ax_cfg = ax_cfg or TrainConfig(seed=seed)
    tg_cfg = tg_cfg or TrainConfig(seed=seed)
    feat_dim = len(target.samples[0].feature) if target.samples else len(aux_list[0].samples[0].feature)
    timings = {"train": 0.0, "test": 0.0}
    curves: dict = {}
    aux_star = []
    for i, aux in enumerate(aux_list):
        cfg = NetConfig.for_model(model, feat_dim, hidden=hidden, input_kind=input_kind)
        net = RegressorNet(cfg, seed=seed + 101 * (i + 1))
        res = train(net, model, [aux], "ax", ax_cfg)
        timings["train"] += res.seconds
        curves[f"aux{i}"] = res.curve
        t = time.perf_counter()
        aux_star.append(annotate_dataset(net, aux, "ax", test_batch_size))
        dt = time.perf_counter() - t
        timings["test"] += dt
        timings[f"aux{i}"] = res.seconds + dt

    emb = pose_embedding(model, aux_star, latent_dim)
    net, target_star, res, dt = train_target(model, aux_star, target, emb, tg_cfg, aux_in_target, seed,
                                             input_kind, hidden, test_batch_size)
    timings["train"] += res.seconds
    curves["target"] = res.curve
    timings["test"] += dt
    timings["target"] = res.seconds + dt
    timings["total"] = timings["train"] + timings["test"]
    return AnnotationRun(aux_star, target_star, net, emb, timings, curves)


def train_target(model: KinematicModel, aux_star: list, target: Dataset, embedding: PcaEmbedding,
                 cfg: TrainConfig | None = None, aux_in_target=None, seed: int = 0, input_kind: str = "feature",
                 hidden: int = 256, test_batch_size: int = 1):
    """Train the image-only network on ``target`` mixed with the chosen
    annotated auxiliary sets and annotate ``target``.

    Returns ``(net, target_star, train_result, test_seconds)``.
    """
    cfg = cfg or TrainConfig(seed=seed)
    chosen = list(range(len(aux_star))) if aux_in_target is None else list(aux_in_target)
    feat_dim = len(target.samples[0].feature) if target.samples else len(aux_star[0].samples[0].feature)
    ncfg = NetConfig.for_model(model, feat_dim, hidden=hidden, input_kind=input_kind, latent_dim=embedding.dim)
    net = RegressorNet(ncfg, embedding, seed=seed + 7)
    res = train(net, model, [target] + [aux_star[i] for i in chosen], "tg", cfg)
    t = time.perf_counter()
    target_star = annotate_dataset(net, target, "tg", test_batch_size)
    return net, target_star, res, time.perf_counter() - t


def self_retrain(model: KinematicModel, aux_star: list, target_star: Dataset, embedding: PcaEmbedding,
                 cfg: TrainConfig | None = None, seed: int = 0, input_kind: str = "feature",
                 hidden: int = 256, test_batch_size: int = 1):
    """Second round: a fresh image-only network whose target samples are
    also supervised by their first-round pseudo ground truth. Returns the
    network and the re-annotated target dataset."""
    if not target_star.annotated:
        raise MissingPseudoGT("the target dataset must carry first-round pseudo ground truth")
    cfg = cfg or TrainConfig(seed=seed)
    cfg = TrainConfig(**{**cfg.__dict__, "supervise_target": True})
    feat_dim = len(target_star.samples[0].feature)
    ncfg = NetConfig.for_model(model, feat_dim, hidden=hidden, input_kind=input_kind, latent_dim=embedding.dim)
    net = RegressorNet(ncfg, embedding, seed=seed + 13)
    train(net, model, [target_star] + list(aux_star), "tg", cfg)
    return net, annotate_dataset(net, target_star, "tg", test_batch_size)
