"""Deterministic generation of kinematic models and datasets with hidden ground truth.

Generated bodies mirror the SMPL joint layout (22 joints), hands the MANO layout
(16 joints) and faces a FLAME-like root + jaw. Meshes are tubes of vertex rings
around bones so that ring centroids land exactly on joints. Every generated
model is mirror symmetric across the x = 0 plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rotmath
from .bodymodel import (N_EXPR, N_SHAPE, PART_JOINTS, KinematicModel, ModelLayer,
                        ModelParams)
from .camera import project
from .dataset import Dataset, Sample

IMAGE_SIZE = 256.0
_MIRROR = np.array([-1.0, 1.0, 1.0])

BODY_JOINTS = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
]
BODY_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
BODY_REST = {
    0: (0.0, 0.0, 0.0), 1: (0.09, -0.08, 0.0), 3: (0.0, 0.11, -0.01), 4: (0.10, -0.48, 0.01),
    6: (0.0, 0.24, 0.0), 7: (0.10, -0.88, -0.03), 9: (0.0, 0.36, 0.01), 10: (0.11, -0.94, 0.10),
    12: (0.0, 0.56, -0.01), 13: (0.07, 0.48, 0.0), 15: (0.0, 0.65, 0.03), 16: (0.18, 0.50, -0.01),
    18: (0.44, 0.50, -0.02), 20: (0.68, 0.50, -0.01),
}
BODY_MIRROR = {1: 2, 4: 5, 7: 8, 10: 11, 13: 14, 16: 17, 18: 19, 20: 21}
BODY_RADIUS = {0: 0.08, 1: 0.07, 3: 0.11, 4: 0.05, 6: 0.12, 7: 0.04, 9: 0.12, 10: 0.035, 12: 0.05,
               13: 0.05, 15: 0.09, 16: 0.045, 18: 0.04, 20: 0.035}
# end segments: joint -> offset of the free end
BODY_ENDS = {15: (0.0, 0.20, 0.0), 10: (0.0, -0.02, 0.08), 20: (0.17, 0.0, 0.0)}
# Human3.6M-style evaluation joints: name -> (ring joint ids with weights)
H36M_EVAL = [
    ("pelvis", {0: 1.0}), ("right_hip", {2: 1.0}), ("right_knee", {5: 1.0}),
    ("right_ankle", {8: 1.0}), ("left_hip", {1: 1.0}), ("left_knee", {4: 1.0}),
    ("left_ankle", {7: 1.0}), ("spine", {3: 0.5, 6: 0.5}), ("thorax", {9: 0.5, 12: 0.5}),
    ("nose", {15: 1.0}), ("head", {"end15": 1.0}), ("left_shoulder", {16: 1.0}),
    ("left_elbow", {18: 1.0}), ("left_wrist", {20: 1.0}), ("right_shoulder", {17: 1.0}),
    ("right_elbow", {19: 1.0}), ("right_wrist", {21: 1.0}),
]
# eval-joint pairs (a, b) whose depth order is exposed in the image descriptor
BODY_DEPTH_PAIRS = [(4, 5), (5, 6), (11, 12), (12, 13), (1, 2), (2, 3), (14, 15), (15, 16),
                    (5, 2), (6, 3), (12, 15), (13, 16), (11, 14)]
BODY_AMPLITUDE = {1: 0.5, 2: 0.5, 3: 0.2, 4: 0.6, 5: 0.6, 6: 0.15, 7: 0.25, 8: 0.25, 9: 0.15,
                  10: 0.1, 11: 0.1, 12: 0.2, 13: 0.15, 14: 0.15, 15: 0.25, 16: 0.6, 17: 0.6,
                  18: 0.7, 19: 0.7, 20: 0.35, 21: 0.35}

HAND_PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14]
HAND_JOINTS = ["wrist", "index1", "index2", "index3", "middle1", "middle2", "middle3",
               "pinky1", "pinky2", "pinky3", "ring1", "ring2", "ring3", "thumb1", "thumb2", "thumb3"]


@dataclass
class Corruption:
    """Per-dataset corruption of the observed annotations and image descriptor."""

    noise3d: float = 0.0  # meters, per coordinate
    missing3d: float = 0.0  # rate of dropped 3D joints (the root is never dropped)
    noise2d: float = 0.0  # pixels
    truncation: float = 0.0  # expected fraction of truncated 2D joints
    feature_noise: float = 0.02  # normalized-coordinate noise on the descriptor
    feature_shift: float = 0.03  # per-sample offset of the descriptor's 2D layout (crop misregistration)
    occlusion: float = 0.05  # extra joints hidden from the descriptor only
    depth_flip: float = 0.1  # probability of a wrong depth-order bit

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ViewRange:
    yaw: tuple = (-np.pi, np.pi)
    tilt: float = 0.15

    def to_dict(self) -> dict:
        return {"yaw": list(self.yaw), "tilt": self.tilt}


# ----------------------------------------------------------------------------
# mesh building blocks


def _ring_basis(axis, central: bool):
    axis = axis / np.linalg.norm(axis)
    if central:
        u = np.array([1.0, 0.0, 0.0])
    else:
        ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    return u, w


def _tube(start, end, radius, n_rings, n_around, central):
    u, w = _ring_basis(np.asarray(end) - np.asarray(start), central)
    ang = (np.arange(n_around) + 0.5) * 2.0 * np.pi / n_around
    circle = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w
    fracs = np.linspace(0.0, 1.0, n_rings)
    verts = [np.asarray(start) + f * (np.asarray(end) - np.asarray(start)) + radius * circle for f in fracs]
    return np.concatenate(verts), fracs


def _tube_faces(offset, n_rings, n_around):
    faces = []
    for r in range(n_rings - 1):
        for k in range(n_around):
            a = offset + r * n_around + k
            b = offset + r * n_around + (k + 1) % n_around
            c, d = a + n_around, b + n_around
            faces += [(a, b, d), (a, d, c)]
    return faces


@dataclass
class _Segment:
    start: np.ndarray
    end: np.ndarray
    driver: int
    start_blend: int | None
    end_blend: int | None
    start_joint: int
    end_joint: object  # joint id or "end<j>"
    radius: float
    central: bool


class _MeshBuilder:
    def __init__(self, n_joints, n_rings, n_around):
        self.J = n_joints
        self.n_rings = n_rings
        self.n_around = n_around
        self.verts, self.weights, self.faces = [], [], []
        self.rings: dict = {}  # ring key (joint id / end key) -> list of vertex indices

    def add(self, seg: _Segment):
        off = sum(len(v) for v in self.verts)
        v, fracs = _tube(seg.start, seg.end, seg.radius, self.n_rings, self.n_around, seg.central)
        W = np.zeros((len(v), self.J))
        for r, f in enumerate(fracs):
            rows = slice(r * self.n_around, (r + 1) * self.n_around)
            W[rows, seg.driver] = 1.0
            if seg.start_blend is not None:
                W[rows, seg.start_blend] += 0.5 * max(0.0, 1.0 - 3.0 * f)
            if seg.end_blend is not None:
                W[rows, seg.end_blend] += 0.5 * max(0.0, 3.0 * f - 2.0)
        W /= W.sum(axis=1, keepdims=True)
        self.verts.append(v)
        self.weights.append(W)
        self.faces += _tube_faces(off, self.n_rings, self.n_around)
        last = (self.n_rings - 1) * self.n_around
        self.rings.setdefault(seg.start_joint, []).extend(range(off, off + self.n_around))
        self.rings.setdefault(seg.end_joint, []).extend(range(off + last, off + last + self.n_around))
        mid = (self.n_rings - 1) // 2
        self.rings.setdefault(("mid", seg.start_joint, seg.end_joint), []).extend(
            range(off + mid * self.n_around, off + (mid + 1) * self.n_around))

    def arrays(self):
        return (np.concatenate(self.verts), np.concatenate(self.weights),
                np.asarray(self.faces, dtype=np.int64))


def mirror_permutation(verts, tol: float = 1e-9) -> np.ndarray:
    """Index map ``perm`` with ``verts[perm] == verts * (-1, 1, 1)``."""
    mirrored = verts * _MIRROR
    d = np.linalg.norm(verts[None, :, :] - mirrored[:, None, :], axis=-1)
    perm = np.argmin(d, axis=1)
    if d[np.arange(len(verts)), perm].max() > tol:
        raise ValueError("vertex set is not mirror symmetric")
    return perm


def _row(n, idx, weights=None):
    r = np.zeros(n)
    idx = np.asarray(idx)
    r[idx] = 1.0 / len(idx) if weights is None else weights
    return r


def _symmetric_field(rng, verts, center, amp):
    """Smooth displacement field d with d(Mv) = M d(v) for the x-mirror M."""
    p = verts - center
    ax, ay, az = np.abs(p[:, 0]), p[:, 1], p[:, 2]
    coef = rng.normal(size=(3, 4))
    freq = rng.uniform(2.0, 6.0, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)

    def smooth(i):
        return (coef[i, 0] + coef[i, 1] * np.cos(freq[i, 0] * ay + phase[i])
                + coef[i, 2] * np.cos(freq[i, 1] * az) + coef[i, 3] * np.cos(freq[i, 2] * ax))

    d = np.stack([p[:, 0] * smooth(0) * 4.0, smooth(1) * 0.5 * ay * 2.0 + 0.1 * smooth(1), smooth(2) * 0.1], axis=1)
    return amp * d / np.abs(d).max()


def _shape_basis(rng, verts, center, amp):
    basis = np.zeros(verts.shape + (N_SHAPE,))
    basis[:, :, 0] = amp * (verts - center) / np.abs(verts - center).max()
    for s in range(1, N_SHAPE):
        basis[:, :, s] = _symmetric_field(rng, verts, center, amp)
    return basis


# ----------------------------------------------------------------------------
# generators


def _body(rng, seed):
    J = 22
    pos = np.zeros((J, 3))
    scale = 1.0 + 0.05 * rng.normal(size=J)
    for j, p in BODY_REST.items():
        pos[j] = p
    for left, right in BODY_MIRROR.items():
        pos[right] = pos[left] * _MIRROR
    # perturb bone vectors, keeping left/right symmetric
    for left, right in BODY_MIRROR.items():
        scale[right] = scale[left]
    out = pos.copy()
    for j in range(1, J):
        q = BODY_PARENTS[j]
        out[j] = out[q] + (pos[j] - pos[q]) * scale[j]
    pos = out
    radius = dict(BODY_RADIUS)
    for left, right in BODY_MIRROR.items():
        radius[right] = radius[left]

    mb = _MeshBuilder(J, n_rings=4, n_around=6)
    segments = []
    for j in range(1, J):
        q = BODY_PARENTS[j]
        if j in BODY_MIRROR.values():
            continue
        segments.append(_Segment(pos[q], pos[j], q, BODY_PARENTS[q] if q > 0 else None, j, q, j,
                                 radius.get(j, 0.05), central=abs(pos[j, 0]) < 1e-12 and abs(pos[q, 0]) < 1e-12))
    for e, off in BODY_ENDS.items():
        segments.append(_Segment(pos[e], pos[e] + np.asarray(off), e, BODY_PARENTS[e], None, e, f"end{e}",
                                 radius.get(e, 0.04) * (1.0 if e == 15 else 0.8), central=(e == 15)))
    mirror_ids = {**BODY_MIRROR, **{v: k for k, v in BODY_MIRROR.items()}}

    def m(j):
        if j is None:
            return None
        if isinstance(j, str):
            return "end" + str(mirror_ids.get(int(j[3:]), int(j[3:])))
        return mirror_ids.get(j, j)

    for seg in segments:
        mb.add(seg)
        if not seg.central:
            mb.add(_Segment(seg.start * _MIRROR, seg.end * _MIRROR, m(seg.driver), m(seg.start_blend),
                            m(seg.end_blend), m(seg.start_joint), m(seg.end_joint), seg.radius, False))
    verts, W, faces = mb.arrays()
    N = len(verts)
    perm = mirror_permutation(verts)

    Jreg = np.stack([_row(N, mb.rings[j]) for j in range(J)])
    Xreg = []
    for _, spec in H36M_EVAL:
        r = np.zeros(N)
        for key, w in spec.items():
            idx = np.asarray(mb.rings[key])
            jitter = rng.dirichlet(np.full(len(idx), 4.0))
            r[idx] += w * (0.8 / len(idx) + 0.2 * jitter)
        Xreg.append(r)
    Xreg = np.stack(Xreg)
    names = [n for n, _ in H36M_EVAL]
    # symmetrize evaluation rows through the vertex mirror map
    for a, name in enumerate(names):
        if name.startswith("left_"):
            b = names.index("right_" + name[5:])
            Xreg[b] = Xreg[a][perm]
        elif not name.startswith("right_"):
            Xreg[a] = 0.5 * (Xreg[a] + Xreg[a][perm])
    Xreg /= Xreg.sum(axis=1, keepdims=True)

    shape = _shape_basis(rng, verts, pos[0], 0.03)
    shape = 0.5 * (shape + shape[perm] * _MIRROR[None, :, None])
    roles = {
        **{n: BODY_JOINTS.index(n) for side in ("left", "right")
           for n in (f"{side}_hip", f"{side}_shoulder", f"{side}_elbow", f"{side}_wrist")},
        "init_eval_joints": [names.index(n) for n in ("left_hip", "right_hip", "left_shoulder", "right_shoulder")],
        "root_eval_joint": 0,
        "depth_pairs": [list(p) for p in BODY_DEPTH_PAIRS],
    }
    return KinematicModel("body", verts, BODY_PARENTS, shape, np.zeros(verts.shape + (N_EXPR,)), W, Jreg, Xreg,
                          faces, list(BODY_JOINTS), names, roles, seed)


def _hand(rng, seed):
    J = 16
    pos = np.zeros((J, 3))
    lengths = np.array([0.040, 0.025, 0.020]) * (1.0 + 0.05 * rng.normal(size=3))
    bases = {1: (0.0, 0.090, 0.030), 4: (0.0, 0.095, 0.010), 10: (0.0, 0.090, -0.010), 7: (0.0, 0.082, -0.028)}
    spread = {1: 0.15, 4: 0.05, 10: -0.05, 7: -0.15}
    for b, p in bases.items():
        pos[b] = p
        d = np.array([0.0, np.cos(spread[b]), np.sin(spread[b])])
        pos[b + 1] = pos[b] + lengths[0] * d
        pos[b + 2] = pos[b + 1] + lengths[1] * d
    pos[13] = (0.0, 0.025, 0.035)
    td = np.array([0.0, 0.6, 0.8])
    pos[14] = pos[13] + 0.035 * td
    pos[15] = pos[14] + 0.030 * td
    ends = {3: lengths[2], 6: lengths[2] * 1.1, 9: lengths[2] * 0.9, 12: lengths[2], 15: 0.025}

    mb = _MeshBuilder(J, n_rings=3, n_around=4)
    for j in range(1, J):
        q = HAND_PARENTS[j]
        mb.add(_Segment(pos[q], pos[j], q, HAND_PARENTS[q] if q > 0 else None, j, q, j,
                        0.012 if q == 0 else 0.009, central=True))
    for e, L in ends.items():
        d = (pos[e] - pos[HAND_PARENTS[e]]) / np.linalg.norm(pos[e] - pos[HAND_PARENTS[e]])
        mb.add(_Segment(pos[e], pos[e] + L * d, e, HAND_PARENTS[e], None, e, f"end{e}", 0.008, central=True))
    verts, W, faces = mb.arrays()
    N = len(verts)
    perm = mirror_permutation(verts)

    Jreg = np.stack([_row(N, mb.rings[j]) for j in range(J)])
    names, rows = ["wrist"], [_row(N, mb.rings[0])]
    for finger, base in (("thumb", 13), ("index", 1), ("middle", 4), ("ring", 10), ("pinky", 7)):
        for i, key in enumerate([base, base + 1, base + 2, f"end{base + 2}"]):
            names.append(f"{finger}{i + 1}")
            idx = np.asarray(mb.rings[key])
            rows.append(_row(N, idx, 0.8 / len(idx) + 0.2 * rng.dirichlet(np.full(len(idx), 4.0))))
    Xreg = np.stack(rows)
    Xreg = 0.5 * (Xreg + Xreg[:, perm])
    Xreg /= Xreg.sum(axis=1, keepdims=True)
    shape = _shape_basis(rng, verts, pos[0], 0.006)
    shape = 0.5 * (shape + shape[perm] * _MIRROR[None, :, None])
    roles = {
        "init_eval_joints": [names.index(n) for n in ("wrist", "index1", "pinky1", "thumb1")],
        "root_eval_joint": 0,
        "depth_pairs": [[names.index(f"{f}1"), names.index(f"{f}4")] for f in ("thumb", "index", "middle", "ring", "pinky")]
        + [[names.index("thumb4"), names.index("index4")], [names.index("index1"), names.index("pinky1")]],
    }
    return KinematicModel("hand", verts, HAND_PARENTS, shape, np.zeros(verts.shape + (N_EXPR,)), W, Jreg, Xreg,
                          faces, list(HAND_JOINTS), names, roles, seed)


FACE_LANDMARKS = {
    "right_eye_out": (-0.045, 0.03), "right_eye_in": (-0.015, 0.03), "left_eye_in": (0.015, 0.03),
    "left_eye_out": (0.045, 0.03), "nose_bridge": (0.0, 0.02), "nose_tip": (0.0, -0.01),
    "mouth_right": (-0.025, -0.05), "mouth_left": (0.025, -0.05), "lip_upper": (0.0, -0.04),
    "lip_lower": (0.0, -0.06), "chin": (0.0, -0.09), "forehead": (0.0, 0.07),
}


def _face(rng, seed):
    n_lat, n_lon = 12, 24
    radii = np.array([0.075, 0.11, 0.09]) * (1.0 + 0.03 * rng.normal(size=3))
    lat = np.linspace(-0.45 * np.pi, 0.45 * np.pi, n_lat)
    lon = (np.arange(n_lon) + 0.5) * 2.0 * np.pi / n_lon
    verts = np.array([[radii[0] * np.cos(a) * np.sin(o), radii[1] * np.sin(a), radii[2] * np.cos(a) * np.cos(o)]
                      for a in lat for o in lon])
    faces = []
    for i in range(n_lat - 1):
        for k in range(n_lon):
            a, b = i * n_lon + k, i * n_lon + (k + 1) % n_lon
            faces += [(a, b, b + n_lon), (a, b + n_lon, a + n_lon)]
    N = len(verts)
    perm = mirror_permutation(verts)

    hinge = np.argsort(np.linalg.norm(verts - np.array([radii[0] * 0.95, -0.03, -0.01]), axis=1))[:3]
    jaw_idx = np.concatenate([hinge, perm[hinge]])
    Jreg = np.stack([np.full(N, 1.0 / N), _row(N, jaw_idx)])
    jaw_pivot = verts[jaw_idx].mean(axis=0)
    # jaw weight grows toward the lower front of the face
    t = np.clip((jaw_pivot[1] - verts[:, 1]) / 0.06, 0.0, 1.0) * (verts[:, 2] > -0.02)
    W = np.stack([1.0 - t, t], axis=1)

    names, rows = [], []
    front = verts[:, 2] > 0
    for name, (x, y) in FACE_LANDMARKS.items():
        cand = np.flatnonzero(front)
        dd = np.linalg.norm(verts[cand][:, :2] - np.array([x, y]), axis=1)
        idx = cand[np.argsort(dd)[:3]]
        names.append(name)
        rows.append(_row(N, idx))
    Xreg = np.stack(rows)
    for a, name in enumerate(names):
        if name.startswith("left_"):
            Xreg[a] = Xreg[names.index("right_" + name[5:])][perm]
        elif not name.startswith("right_"):
            Xreg[a] = 0.5 * (Xreg[a] + Xreg[a][perm])
    Xreg /= Xreg.sum(axis=1, keepdims=True)

    shape = _shape_basis(rng, verts, np.zeros(3), 0.006)
    shape = 0.5 * (shape + shape[perm] * _MIRROR[None, :, None])
    expr = np.zeros((N, 3, N_EXPR))
    for s in range(N_EXPR):
        name = list(FACE_LANDMARKS)[rng.integers(len(FACE_LANDMARKS))]
        x, y = FACE_LANDMARKS[name]
        center = np.array([abs(x), y, radii[2]])
        direction = rng.normal(size=3)
        for c, dvec in ((center, direction), (center * _MIRROR, direction * _MIRROR)):
            bump = np.exp(-np.sum((verts - c) ** 2, axis=1) / (2 * 0.02**2))
            expr[:, :, s] += 0.004 * bump[:, None] * dvec
    roles = {
        "init_eval_joints": [names.index(n) for n in ("right_eye_out", "left_eye_out", "mouth_right", "mouth_left")],
        "root_eval_joint": names.index("nose_bridge"),
        "depth_pairs": [[names.index("nose_tip"), names.index("nose_bridge")],
                        [names.index("right_eye_out"), names.index("left_eye_out")],
                        [names.index("chin"), names.index("forehead")]],
    }
    return KinematicModel("face", verts, [-1, 0], shape, expr, W, Jreg, Xreg, faces,
                          ["head", "jaw"], names, roles, seed)


def gen_model(seed: int, part_kind: str = "body") -> KinematicModel:
    """Generate a kinematic model; identical seeds give identical models."""
    builders = {"body": _body, "hand": _hand, "face": _face}
    if part_kind not in builders:
        raise ValueError(f"unknown part kind {part_kind!r}")
    rng = np.random.default_rng([seed, list(builders).index(part_kind)])
    model = builders[part_kind](rng, seed)
    model.validate()
    return model


# ----------------------------------------------------------------------------
# pose distribution


@dataclass
class PoseManifold:
    """Low-rank nonlinear pose distribution: ``amp * tanh(W2 tanh(W1 u + b1) + b2)``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    amplitude: np.ndarray
    noise: float = 0.02

    @property
    def latent_dim(self) -> int:
        return self.W1.shape[1]

    def sample(self, rng, n: int) -> np.ndarray:
        u = rng.normal(size=(n, self.latent_dim))
        h = np.tanh(u @ self.W1.T + self.b1)
        pose = self.amplitude * np.tanh(h @ self.W2.T + self.b2)
        return pose + self.noise * rng.normal(size=pose.shape)


def pose_manifold(model: KinematicModel) -> PoseManifold:
    """The fixed pose distribution of a generated model (seeded by the model)."""
    J = model.n_joints
    latent = {"body": 8, "hand": 4, "face": 2}[model.part_kind]
    rng = np.random.default_rng([model.seed or 0, 7919, J])
    D = 3 * (J - 1)
    hidden = 24
    if model.part_kind == "body":
        amp = np.repeat([BODY_AMPLITUDE[j] for j in range(1, J)], 3)
    elif model.part_kind == "hand":
        amp = np.full(D, 0.35)
    else:
        amp = np.array([0.25, 0.05, 0.05])
    W1 = rng.normal(size=(hidden, latent)) / np.sqrt(latent)
    b1 = 0.3 * rng.normal(size=hidden)
    W2 = rng.normal(size=(D, hidden)) * 1.2 / np.sqrt(hidden)
    b2 = 0.3 * rng.normal(size=D)
    return PoseManifold(W1, b1, W2, b2, amp)


def _global_rotations(rng, n, view: ViewRange, part: str):
    yaw = rng.uniform(view.yaw[0], view.yaw[1], size=n)
    tilt = view.tilt * rng.normal(size=(n, 2))
    out = []
    for y, (p, r) in zip(yaw, tilt):
        if part == "body":
            R = rotmath.euler_to_mat((0.0, y, 0.0)) @ rotmath.euler_to_mat((p, 0.0, r))
        else:
            R = rotmath.euler_to_mat((p, y, r))
        out.append(rotmath.mat_to_aa(R))
    return np.array(out)


# ----------------------------------------------------------------------------
# image descriptor


def feature_dim(model: KinematicModel) -> int:
    K = model.n_eval
    return 3 * K + len(model.roles.get("depth_pairs", []))


def describe(model: KinematicModel, p2d_clean, visible, joints3d, rng, corruption: Corruption) -> np.ndarray:
    """Synthetic image feature: noisy masked normalized 2D joints, their
    visibility bits, and coarse depth-order bits for fixed joint pairs."""
    K = model.n_eval
    seen = visible & (rng.random(K) >= corruption.occlusion)
    xy = (p2d_clean - IMAGE_SIZE / 2) / (IMAGE_SIZE / 2)
    xy = xy + corruption.feature_noise * rng.normal(size=xy.shape) + corruption.feature_shift * rng.normal(size=2)
    xy = np.where(seen[:, None], xy, 0.0)
    bits = []
    for a, b in model.roles.get("depth_pairs", []):
        bit = 1.0 if joints3d[a, 2] > joints3d[b, 2] else -1.0
        if rng.random() < corruption.depth_flip:
            bit = -bit
        bits.append(bit)
    return np.concatenate([xy.ravel(), seen.astype(float), np.asarray(bits)])


def p2d_descriptor(p2d, vis2d) -> np.ndarray:
    """Pose-only input: normalized GT 2D joints plus visibility bits."""
    xy = (np.asarray(p2d) - IMAGE_SIZE / 2) / (IMAGE_SIZE / 2)
    xy = np.where(np.asarray(vis2d)[:, None], xy, 0.0)
    return np.concatenate([xy.ravel(), np.asarray(vis2d, dtype=float)])


def _truncate(rng, p2d, rate):
    K = len(p2d)
    visible = np.ones(K, dtype=bool)
    m = rng.binomial(K, rate) if rate > 0 else 0
    if m:
        direction = rng.normal(size=2)
        order = np.argsort(-(p2d @ direction))
        visible[order[:m]] = False
    return visible


# ----------------------------------------------------------------------------
# datasets


def gen_dataset(model: KinematicModel, n: int, kind: str = "aux", corruption: Corruption | None = None,
                seed: int = 0, view: ViewRange | None = None, shape_std: float = 1.0) -> Dataset:
    """Sample ``n`` ground-truth parameter sets and their observations."""
    corruption = corruption or Corruption()
    view = view or ViewRange()
    rng = np.random.default_rng([seed, 0 if kind == "aux" else 1, n])
    manifold = pose_manifold(model)
    K = model.n_eval
    root = model.roles.get("root_eval_joint", 0)

    poses = manifold.sample(rng, n).reshape(n, -1, 3)
    glob = _global_rotations(rng, n, view, model.part_kind)
    betas = shape_std * rng.normal(size=(n, N_SHAPE))
    expr = rng.normal(size=(n, N_EXPR)) if model.part_kind == "face" else np.zeros((n, N_EXPR))
    extent = {"body": 2.0, "hand": 0.25, "face": 0.25}[model.part_kind]
    s_ref = 0.8 * IMAGE_SIZE / extent
    cams = np.column_stack([s_ref * rng.uniform(0.9, 1.1, n),
                            IMAGE_SIZE / 2 + 8.0 * rng.normal(size=n),
                            IMAGE_SIZE / 2 + 8.0 * rng.normal(size=n)])

    layer = ModelLayer(model)
    pose_all = np.concatenate([glob[:, None], poses], axis=1)
    joints, _ = layer.forward(rotmath.aa_to_mat(pose_all), betas, expr)

    truth, samples = [], []
    for i in range(n):
        theta = ModelParams(model.part_kind, glob[i], poses[i], betas[i], expr[i], cams[i])
        truth.append(theta)
        p2d_clean = project(joints[i], cams[i])
        vis2d = _truncate(rng, p2d_clean, corruption.truncation) if kind == "target" else np.ones(K, dtype=bool)
        p2d = p2d_clean + corruption.noise2d * rng.normal(size=(K, 2))
        feat = describe(model, p2d_clean, vis2d, joints[i], rng, corruption)
        p3d = vis3d = None
        if kind == "aux":
            offset = np.array([0.0, 0.0, 4.0]) + 0.2 * rng.normal(size=3)
            p3d = joints[i] + offset + corruption.noise3d * rng.normal(size=(K, 3))
            vis3d = rng.random(K) >= corruption.missing3d
            vis3d[root] = True
            p3d = np.where(vis3d[:, None], p3d, 0.0)
        samples.append(Sample(feat, p2d, vis2d, p3d, vis3d))
    header = {
        "seed": seed,
        "model_hash": model.digest(),
        "n": n,
        "corruption": corruption.to_dict(),
        "view": view.to_dict(),
    }
    return Dataset(kind, model.part_kind, samples, header, truth)


def pose_corpus(model: KinematicModel, n: int, seed: int = 0) -> np.ndarray:
    """Unpaired poses from the model's distribution, rows of length 3(J-1)."""
    rng = np.random.default_rng([seed, 31337])
    return pose_manifold(model).sample(rng, n)


__all__ = [
    "Corruption", "ViewRange", "PoseManifold", "gen_model", "gen_dataset", "pose_manifold",
    "pose_corpus", "describe", "p2d_descriptor", "feature_dim", "mirror_permutation", "IMAGE_SIZE",
]
