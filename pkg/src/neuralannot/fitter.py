"""Per-sample optimization baseline: fit model parameters to 3D or 2D joints.

3D fitting places the model in the dataset frame with rigid extrinsics
``x -> R x + t``, seeded by a Kabsch alignment of a few torso (or named)
joints, and scores joints with a Geman-McClure penalty. The extrinsics are
parameterized relative to the seed, ``R = R0 exp(omega)``, ``t = t0 + R0 delta``,
so the whole problem is exactly equivariant to rigid motions of the target.

Every fit runs Adam stages (global/extrinsics first, then everything) and a
Levenberg-Marquardt refinement on the same objective. Fits of many samples
run in lockstep over a batch axis; each row is still an independent problem.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rotmath
from .bodymodel import N_EXPR, N_SHAPE, KinematicModel, ModelLayer, ModelParams, shape_rest
from .camera import Extrinsics, init_extrinsics_svd, project, project_vjp
from .errors import DegenerateConfiguration, TooFewJoints
from .optim import LMConfig, MinimizeConfig, minimize_batched, minimize_lm
from .priors import LossWeights, PcaEmbedding, geman_mcclure


@dataclass
class FitConfig:
    stage_iters: tuple = (60, 200)  # Adam: (global + extrinsics/camera, all parameters)
    refine_iters: int = 40  # Levenberg-Marquardt on all parameters
    lr: float = 0.02
    tol: float = 1e-10
    sigma: float = 0.1  # meters, 3D Geman-McClure scale
    sigma_2d: float = 100.0  # pixels
    w_data_2d: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    embedding: PcaEmbedding | None = None  # pose parameterization for 2D fits
    init: ModelParams | None = None  # starting point (2D fits: camera and pose)

    def __post_init__(self):
        self.stage_iters = tuple(int(n) for n in self.stage_iters)
        if any(n < 0 for n in self.stage_iters) or self.refine_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if sum(self.stage_iters) + self.refine_iters <= 0:
            raise ValueError("at least one optimization iteration is required")
        if self.sigma <= 0 or self.sigma_2d <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class FitReport:
    params: ModelParams
    objective: float
    terms: dict
    n_iters: int
    converged: bool
    trace: list  # objective at the start and after every accepted step
    extrinsics: Extrinsics | None = None
    initial_objective: float = float("nan")


def _visible(mask, K, minimum):
    vis = np.ones(K, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if vis.shape != (K,):
        raise ValueError(f"visibility mask must have {K} entries")
    if vis.sum() < minimum:
        raise TooFewJoints(f"{int(vis.sum())} visible joints, need at least {minimum}")
    return vis


# ----------------------------------------------------------------------------
# objectives


class _RobustObjective:
    """``w * sum_k vis_k rho(|r_k|) + sum_g lam_g |x_g|^2`` over a batch.

    Subclasses define ``residuals(x, idx) -> (r, ctx)`` with ``r`` of shape
    (b, K, c) and ``residual_vjp(x, idx, ctx, g_r) -> grads``.
    """

    keys: list
    prior_keys: dict  # parameter key -> L2 weight

    def __init__(self, vis, weight, sigma):
        self.vis = vis.astype(float)
        self.weight = weight
        self.sigma = sigma

    def _data(self, r, idx):
        e = np.linalg.norm(r, axis=2)
        vis = self.vis[idx]
        value = self.weight * np.sum(vis * geman_mcclure(e, self.sigma), axis=1)
        s2 = self.sigma**2
        # d rho / d(e^2), so that d rho / d r = 2 * dpsi * r
        dpsi = self.weight * vis * s2 * s2 / (s2 + e * e) ** 2
        return value, dpsi

    def _prior(self, x):
        b = len(next(iter(x.values())))
        value = np.zeros(b)
        for k, lam in self.prior_keys.items():
            if lam:
                value += lam * np.sum(x[k].reshape(b, -1) ** 2, axis=1)
        return value

    def terms(self, x, idx):
        r, _ = self.residuals(x, idx)
        data, _ = self._data(r, idx)
        prior = self._prior(x)
        return {"data": data, "prior": prior, "total": data + prior}

    def __call__(self, x, idx):
        r, ctx = self.residuals(x, idx)
        data, dpsi = self._data(r, idx)
        g = self.residual_vjp(x, idx, ctx, 2.0 * dpsi[..., None] * r)
        for k, lam in self.prior_keys.items():
            if lam:
                g[k] = g[k] + 2.0 * lam * x[k]
        return data + self._prior(x), g

    # -- Gauss-Newton model over a flat parameter vector --------------------

    def pack(self, x):
        b = len(x[self.keys[0]])
        return np.concatenate([x[k].reshape(b, -1) for k in self.keys], axis=1)

    def unpack(self, vec, template):
        out = dict(template)
        off = 0
        for k in self.keys:
            shape = template[k].shape[1:]
            n = int(np.prod(shape))
            out[k] = vec[:, off:off + n].reshape((len(vec),) + shape)
            off += n
        return out

    def gauss_newton(self, template):
        """``model_fn`` for ``minimize_lm`` over the keys of this objective."""

        def fn(vec, idx, second_order):
            base = {k: v[idx] for k, v in template.items()}
            x = self.unpack(vec, base)
            if not second_order:
                return self.terms(x, idx)["total"]
            r, _ = self.residuals(x, idx)
            b, K, c = r.shape
            M = K * c
            # residual Jacobian by one reverse pass per residual component
            xt = {k: np.repeat(v, M, axis=0) for k, v in x.items()}
            it = np.repeat(idx, M)
            _, ctx = self.residuals(xt, it)
            cot = np.tile(np.eye(M).reshape(M, K, c), (b, 1, 1))
            gt = self.residual_vjp(xt, it, ctx, cot)
            Jac = self.pack({k: gt[k] for k in self.keys}).reshape(b, M, -1)
            data, dpsi = self._data(r, idx)
            w = np.repeat(dpsi, c, axis=1)  # (b, M)
            rf = r.reshape(b, M)
            grad = 2.0 * np.einsum("bm,bmp->bp", w * rf, Jac)
            H = 2.0 * np.einsum("bm,bmp,bmq->bpq", w, Jac, Jac)
            prior_diag = self.pack({k: np.full_like(x[k], 2.0 * self.prior_keys.get(k, 0.0)) for k in self.keys})
            prior_grad = self.pack({k: 2.0 * self.prior_keys.get(k, 0.0) * x[k] for k in self.keys})
            H = H + prior_diag[:, :, None] * np.eye(H.shape[1])
            return data + self._prior(x), grad + prior_grad, H

        return fn


class _Objective3D(_RobustObjective):
    def __init__(self, model, target, vis, cfg: FitConfig, R0, t0):
        super().__init__(vis, cfg.weights.w_data, cfg.sigma)
        self.layer = ModelLayer(model)
        self.face = model.part_kind == "face"
        self.target = target  # (B, K, 3)
        self.R0, self.t0 = R0, t0  # (B, 3, 3), (B, 3)
        lam = cfg.weights.fit
        self.prior_keys = {"joint_rots": lam.get("pose", 0.0), "betas": lam.get("betas", 0.0)}
        self.keys = ["global_rot", "joint_rots", "betas", "omega", "delta"]
        if self.face:
            self.prior_keys["expression"] = lam.get("expression", 0.0)
            self.keys.append("expression")

    def extrinsics(self, x, idx):
        R = self.R0[idx] @ rotmath.aa_to_mat(x["omega"])
        return R, self.t0[idx] + np.einsum("bij,bj->bi", self.R0[idx], x["delta"])

    def residuals(self, x, idx):
        pose = np.concatenate([x["global_rot"][:, None], x["joint_rots"]], axis=1)
        expr = x["expression"] if self.face else np.zeros((len(idx), N_EXPR))
        joints, cache = self.layer.forward(rotmath.aa_to_mat(pose), x["betas"], expr)
        R, t = self.extrinsics(x, idx)
        r = np.einsum("bkj,bij->bki", joints, R) + t[:, None] - self.target[idx]
        return r, (pose, joints, cache, R)

    def residual_vjp(self, x, idx, ctx, g_r):
        pose, joints, cache, R = ctx
        R0 = self.R0[idx]
        g_joints = np.einsum("bki,bij->bkj", g_r, R)
        gR_ext = np.einsum("bki,bkj->bij", g_r, joints)
        gRots, g_b, g_e = self.layer.backward(cache, g_joints)
        g_pose = rotmath.aa_to_mat_vjp(pose, gRots)
        return {
            "global_rot": g_pose[:, 0],
            "joint_rots": g_pose[:, 1:],
            "betas": g_b,
            "expression": g_e if self.face else np.zeros_like(x["expression"]),
            "omega": rotmath.aa_to_mat_vjp(x["omega"], np.swapaxes(R0, 1, 2) @ gR_ext),
            "delta": np.einsum("bji,bj->bi", R0, g_r.sum(axis=1)),
        }


class _Objective2D(_RobustObjective):
    """Weak-perspective reprojection objective.

    The camera is optimized as ``(log s, tx / 100, ty / 100)`` so that one
    step size suits every coordinate.
    """

    def __init__(self, model, target, vis, cfg: FitConfig):
        super().__init__(vis, cfg.w_data_2d, cfg.sigma_2d)
        self.layer = ModelLayer(model)
        self.face = model.part_kind == "face"
        self.target = target
        self.emb = cfg.embedding
        lam = cfg.weights.fit
        self.pose_key = "joint_rots" if self.emb is None else "latent"
        self.prior_keys = {self.pose_key: lam.get("pose" if self.emb is None else "latent", 0.0),
                           "betas": lam.get("betas", 0.0)}
        self.keys = ["global_rot", self.pose_key, "betas", "cam"]
        if self.face:
            self.prior_keys["expression"] = lam.get("expression", 0.0)
            self.keys.append("expression")

    def decode_pose(self, x):
        if self.emb is None:
            return x["joint_rots"]
        return (self.emb.mean + x["latent"] @ self.emb.basis).reshape(len(x["latent"]), -1, 3)

    @staticmethod
    def camera(x):
        c = x["cam"]
        return np.stack([np.exp(c[:, 0]), 100.0 * c[:, 1], 100.0 * c[:, 2]], axis=1)

    def residuals(self, x, idx):
        pose = np.concatenate([x["global_rot"][:, None], self.decode_pose(x)], axis=1)
        expr = x["expression"] if self.face else np.zeros((len(idx), N_EXPR))
        joints, cache = self.layer.forward(rotmath.aa_to_mat(pose), x["betas"], expr)
        cam = self.camera(x)
        return project(joints, cam) - self.target[idx], (pose, joints, cache, cam)

    def residual_vjp(self, x, idx, ctx, g_r):
        pose, joints, cache, cam = ctx
        b = len(idx)
        g3, g_cam = project_vjp(joints, cam, g_r)
        gRots, g_b, g_e = self.layer.backward(cache, g3)
        g_pose = rotmath.aa_to_mat_vjp(pose, gRots)
        g = {
            "global_rot": g_pose[:, 0],
            "betas": g_b,
            "expression": g_e if self.face else np.zeros_like(x["expression"]),
            "cam": g_cam * np.stack([cam[:, 0], np.full(b, 100.0), np.full(b, 100.0)], axis=1),
        }
        if self.emb is None:
            g["joint_rots"] = g_pose[:, 1:]
        else:
            g["latent"] = g_pose[:, 1:].reshape(b, -1) @ self.emb.basis.T
        return g


def _run_stages(obj, x, cfg: FitConfig, stage_keys):
    B = len(next(iter(x.values())))
    traces = [[] for _ in range(B)]
    iters = np.zeros(B, dtype=np.int64)
    converged = np.ones(B, dtype=bool)

    def extend(i, trace):
        traces[i].extend(trace if not traces[i] else trace[1:])

    for n, keys in zip(cfg.stage_iters, stage_keys):
        if n <= 0:
            continue
        mcfg = MinimizeConfig(max_iters=n, lr=cfg.lr, tol=cfg.tol)
        results = minimize_batched(obj, x, mcfg, keys=keys)
        x = {k: np.stack([r.params[k] for r in results]) for k in x}
        for i, r in enumerate(results):
            extend(i, r.trace)
            iters[i] += r.n_iters
            converged[i] = r.converged
    if cfg.refine_iters > 0:
        results = minimize_lm(obj.gauss_newton(x), obj.pack(x), LMConfig(max_iters=cfg.refine_iters))
        x = obj.unpack(np.stack([r.params for r in results]), x)
        for i, r in enumerate(results):
            extend(i, r.trace)
            iters[i] += r.n_iters
            converged[i] = r.converged
    return x, traces, iters, converged


def _stack_init(inits, B, J):
    x = {
        "global_rot": np.zeros((B, 3)),
        "joint_rots": np.zeros((B, J - 1, 3)),
        "betas": np.zeros((B, N_SHAPE)),
        "expression": np.zeros((B, N_EXPR)),
    }
    for i, p in enumerate(inits):
        if p is not None:
            x["global_rot"][i] = p.global_rot
            x["joint_rots"][i] = p.joint_rots
            x["betas"][i] = p.betas
            x["expression"][i] = p.expression
    return x


def _batch_inputs(model, targets, vis, dim, minimum):
    target = np.asarray(targets, dtype=float)
    K = model.n_eval
    if target.ndim != 3 or target.shape[1:] != (K, dim):
        raise ValueError(f"targets must be (B, {K}, {dim}), got {target.shape}")
    B = len(target)
    vis = np.ones((B, K), dtype=bool) if vis is None else np.asarray(vis, dtype=bool).reshape(B, K)
    for i in range(B):
        _visible(vis[i], K, minimum)
    return target, vis


# ----------------------------------------------------------------------------
# 3D


def _init_joint_set(model: KinematicModel, vis):
    init = [j for j in model.roles.get("init_eval_joints", []) if vis[j]]
    if len(init) < 3:
        init = list(np.flatnonzero(vis))
    return np.asarray(init)


def fit_3d_batch(model: KinematicModel, p3d, vis=None, cfg: FitConfig | None = None, inits=None) -> list:
    """Independent 3D fits of B samples, run in lockstep; see ``fit_3d``."""
    cfg = cfg or FitConfig()
    target, vis = _batch_inputs(model, p3d, vis, 3, 3)
    B = len(target)
    inits = [cfg.init] * B if inits is None else list(inits)
    x = _stack_init(inits, B, model.n_joints)
    layer = ModelLayer(model)
    pose0 = np.concatenate([x["global_rot"][:, None], x["joint_rots"]], axis=1)
    start, _ = layer.forward(rotmath.aa_to_mat(pose0), x["betas"], x["expression"])
    R0 = np.empty((B, 3, 3))
    t0 = np.empty((B, 3))
    for i in range(B):
        idx = _init_joint_set(model, vis[i])
        try:
            R0[i], t0[i] = init_extrinsics_svd(start[i][idx], target[i][idx])
        except DegenerateConfiguration:
            idx = np.flatnonzero(vis[i])
            R0[i], t0[i] = init_extrinsics_svd(start[i][idx], target[i][idx])
    x["omega"] = np.zeros((B, 3))
    x["delta"] = np.zeros((B, 3))

    obj = _Objective3D(model, target, vis, cfg, R0, t0)
    everyone = np.arange(B)
    initial = obj.terms(x, everyone)["total"]
    x, traces, iters, converged = _run_stages(obj, x, cfg, [["global_rot", "omega", "delta"], obj.keys])

    R, t = obj.extrinsics(x, everyone)
    terms = obj.terms(x, everyone)
    # fold the extrinsic rotation into the global rotation so root-relative
    # joints of the result live in the target frame
    glob = rotmath.mat_to_aa(R @ rotmath.aa_to_mat(x["global_rot"]))
    # the folded rotation pivots about the root joint, not the origin, so the
    # translation that places the result in the target frame shifts by (R - I) root
    root = shape_rest(model, x["betas"], x["expression"] if model.part_kind == "face" else None)[1][:, 0]
    t = t + np.einsum("bij,bj->bi", R, root) - root
    face = model.part_kind == "face"
    reports = []
    for i in range(B):
        cam = inits[i].camera if inits[i] is not None else np.array([1.0, 0.0, 0.0])
        params = ModelParams(model.part_kind, glob[i], x["joint_rots"][i], x["betas"][i],
                             x["expression"][i] if face else np.zeros(N_EXPR), cam)
        reports.append(FitReport(params, float(terms["total"][i]), {k: float(v[i]) for k, v in terms.items()},
                                 int(iters[i]), bool(converged[i]), traces[i], Extrinsics(R[i], t[i]),
                                 float(initial[i])))
    return reports


def fit_3d(model: KinematicModel, p3d, vis=None, cfg: FitConfig | None = None) -> FitReport:
    """Fit parameters and rigid extrinsics to 3D evaluation joints (meters).

    Minimizes ``w_data * sum_visible rho_GM(|R j_k + t - p_k|) + L2 prior``.
    The returned global rotation already includes ``R``; ``extrinsics`` holds
    that ``R`` and the translation ``t`` with ``model_forward(params).joints3d
    + t`` in the target frame.
    """
    target = np.asarray(p3d, dtype=float)
    if target.shape != (model.n_eval, 3):
        raise ValueError(f"3D target must be ({model.n_eval}, 3), got {target.shape}")
    if vis is not None:
        _visible(vis, model.n_eval, 3)
    return fit_3d_batch(model, target[None], None if vis is None else np.asarray(vis)[None], cfg)[0]


# ----------------------------------------------------------------------------
# 2D


def _camera_from_bbox(model: KinematicModel, target, vis):
    """Scale and shift that match the rest pose's 2D extent to the target's."""
    rest = model.external_regressor @ model.template
    pts_m, pts_t = rest[vis, :2], target[vis]
    spread_m = np.sqrt(np.sum(np.var(pts_m, axis=0)))
    spread_t = np.sqrt(np.sum(np.var(pts_t, axis=0)))
    s = spread_t / max(spread_m, 1e-9)
    t = pts_t.mean(axis=0) - s * pts_m.mean(axis=0)
    return np.array([s, t[0], t[1]])


def fit_2d_batch(model: KinematicModel, p2d, vis=None, cfg: FitConfig | None = None, inits=None) -> list:
    """Independent 2D fits of B samples, run in lockstep; see ``fit_2d``."""
    cfg = cfg or FitConfig()
    target, vis = _batch_inputs(model, p2d, vis, 2, 4)
    B = len(target)
    inits = [cfg.init] * B if inits is None else list(inits)
    emb = cfg.embedding
    x = _stack_init(inits, B, model.n_joints)
    cams = np.stack([p.camera if p is not None else _camera_from_bbox(model, target[i], vis[i])
                     for i, p in enumerate(inits)])
    if np.any(cams[:, 0] <= 0):
        raise ValueError("camera scale must be positive")
    x["cam"] = np.stack([np.log(cams[:, 0]), cams[:, 1] / 100.0, cams[:, 2] / 100.0], axis=1)
    if emb is not None:
        lat = np.zeros((B, emb.dim))
        for i, p in enumerate(inits):
            if p is not None:
                lat[i] = p.latent if p.latent is not None else (p.joint_rots.reshape(-1) - emb.mean) @ emb.basis.T
        x["latent"] = lat
        del x["joint_rots"]

    obj = _Objective2D(model, target, vis, cfg)
    everyone = np.arange(B)
    initial = obj.terms(x, everyone)["total"]
    x, traces, iters, converged = _run_stages(obj, x, cfg, [["global_rot", "cam"], obj.keys])
    terms = obj.terms(x, everyone)
    poses = obj.decode_pose(x)
    cams = obj.camera(x)
    face = model.part_kind == "face"
    reports = []
    for i in range(B):
        params = ModelParams(model.part_kind, x["global_rot"][i], poses[i], x["betas"][i],
                             x["expression"][i] if face else np.zeros(N_EXPR), cams[i],
                             None if emb is None else x["latent"][i])
        reports.append(FitReport(params, float(terms["total"][i]), {k: float(v[i]) for k, v in terms.items()},
                                 int(iters[i]), bool(converged[i]), traces[i], None, float(initial[i])))
    return reports


def fit_2d(model: KinematicModel, p2d, vis=None, cfg: FitConfig | None = None) -> FitReport:
    """Fit parameters and a weak-perspective camera to 2D joints (pixels).

    With an embedding in ``cfg`` the pose is optimized through its latent
    code; otherwise joint rotations are free.
    """
    target = np.asarray(p2d, dtype=float)
    if target.shape != (model.n_eval, 2):
        raise ValueError(f"2D target must be ({model.n_eval}, 2), got {target.shape}")
    if vis is not None:
        _visible(vis, model.n_eval, 4)
    return fit_2d_batch(model, target[None], None if vis is None else np.asarray(vis)[None], cfg)[0]


# ----------------------------------------------------------------------------
# datasets


def _fit_chunk(args):
    model, samples, mode, cfg = args
    if mode == "3d":
        reports = fit_3d_batch(model, np.stack([s.p3d for s in samples]), np.stack([s.vis3d for s in samples]), cfg)
    else:
        reports = fit_2d_batch(model, np.stack([s.p2d for s in samples]), np.stack([s.vis2d for s in samples]), cfg)
    return [r.params for r in reports]


def fit_dataset(model: KinematicModel, dataset, mode: str = "3d", cfg: FitConfig | None = None,
                jobs: int = 1, chunk: int = 128) -> list:
    """Fit every sample independently; the result order matches the dataset.

    Samples are fitted in lockstep chunks, and chunks fan out over ``jobs``
    worker processes. Each fit is independent of its chunk-mates, so the
    result does not depend on ``jobs`` or ``chunk``.
    """
    if mode not in ("2d", "3d"):
        raise ValueError("mode must be '2d' or '3d'")
    cfg = cfg or FitConfig()
    samples = list(dataset.samples)
    if not samples:
        return []
    work = [(model, samples[i:i + chunk], mode, cfg) for i in range(0, len(samples), chunk)]
    if jobs <= 1 or len(work) < 2:
        out = [_fit_chunk(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_fit_chunk, work))
    return [p for chunk_params in out for p in chunk_params]
