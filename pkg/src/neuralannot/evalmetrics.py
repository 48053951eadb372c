"""Annotation and pose-estimation error metrics. Distances are in meters
internally and reported in millimeters; 2D errors are in pixels."""

from __future__ import annotations

import numpy as np

from .bodymodel import KinematicModel, eval_joints, model_forward
from .camera import project, similarity_align
from .dataset import Dataset, ground_truth
from .errors import DegenerateConfiguration, DimensionMismatch, MissingGroundTruth, NoVisibleJoints

AUC_RANGE_MM = (0.0, 50.0)
AUC_STEPS = 100


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim < 2 or pred.shape[-1] != 3:
        raise DimensionMismatch(f"point sets must match and end in 3 coordinates: {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred, gt) -> float:
    """Mean per-joint Euclidean distance in mm (batched inputs are averaged)."""
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def mpvpe(pred_verts, gt_verts) -> float:
    """Mean per-vertex Euclidean distance in mm."""
    return mpjpe(pred_verts, gt_verts)


def procrustes(pred, gt) -> np.ndarray:
    """``pred`` after the least-squares similarity transform onto ``gt``."""
    pred, gt = _pair(pred, gt)
    if len(pred) < 3:
        raise DegenerateConfiguration("alignment needs at least three points")
    if np.linalg.matrix_rank(pred - pred.mean(0), tol=1e-12) < 2:
        raise DegenerateConfiguration("alignment needs non-collinear points")
    s, R, t = similarity_align(pred, gt)
    return s * pred @ R.T + t


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after similarity alignment; batched (B, K, 3) inputs are aligned per sample."""
    pred, gt = _pair(pred, gt)
    if pred.ndim == 2:
        return mpjpe(procrustes(pred, gt), gt)
    return float(np.mean([mpjpe(procrustes(p, g), g) for p, g in zip(pred, gt)]))


def pa_mpvpe(pred_verts, gt_verts) -> float:
    return pa_mpjpe(pred_verts, gt_verts)


def pck_auc(pred, gt, lo: float = AUC_RANGE_MM[0], hi: float = AUC_RANGE_MM[1], steps: int = AUC_STEPS) -> float:
    """Normalized area under the fraction-of-joints-within-threshold curve
    over ``steps`` evenly spaced thresholds in [lo, hi] mm."""
    pred, gt = _pair(pred, gt)
    if pred.size == 0:
        raise DimensionMismatch("no joints to evaluate")
    d = np.linalg.norm(pred - gt, axis=-1).ravel() * 1000.0
    thr = np.linspace(lo, hi, steps)
    frac = (d[None, :] <= thr[:, None]).mean(axis=1)
    return float(np.trapezoid(frac, thr) / (hi - lo))


def err2d(model: KinematicModel, params, p2d, vis2d=None, camera=None) -> float:
    """Mean pixel distance over visible joints between the projected joints
    of ``params`` and the 2D annotation."""
    p2d = np.asarray(p2d, dtype=float)
    vis = np.ones(len(p2d), dtype=bool) if vis2d is None else np.asarray(vis2d, dtype=bool)
    if p2d.shape != (model.n_eval, 2) or vis.shape != (model.n_eval,):
        raise DimensionMismatch(f"2D pose must be ({model.n_eval}, 2)")
    if not vis.any():
        raise NoVisibleJoints("no visible 2D joint")
    joints = model_forward(model, params).joints3d
    proj = project(joints, params.camera if camera is None else camera)
    return float(np.linalg.norm(proj[vis] - p2d[vis], axis=1).mean())


def mean_err2d(model: KinematicModel, dataset: Dataset) -> float:
    """Mean over samples with a visible joint of ``err2d`` of their pseudo ground truth."""
    vals = [err2d(model, s.params_star, s.p2d, s.vis2d) for s in dataset.samples if s.vis2d.any()]
    if not vals:
        raise NoVisibleJoints("no sample has a visible 2D joint")
    return float(np.mean(vals))


def _root(model: KinematicModel) -> int:
    return int(model.roles.get("root_eval_joint", 0))


def root_relative(joints, root: int) -> np.ndarray:
    joints = np.asarray(joints, dtype=float)
    return joints - joints[..., root: root + 1, :]


def per_sample_3d_error(model: KinematicModel, dataset: Dataset, truth: list | None = None) -> np.ndarray:
    """Root-relative per-sample MPJPE (mm) between pseudo ground truth and truth."""
    truth = ground_truth(dataset) if truth is None else truth
    if not dataset.samples or truth is None:
        raise MissingGroundTruth("direct error needs a non-empty dataset with hidden ground truth")
    if not dataset.annotated:
        raise MissingGroundTruth("every sample needs a pseudo ground truth")
    root = _root(model)
    pred = root_relative(eval_joints(model, [s.params_star for s in dataset.samples]), root)
    gt = root_relative(eval_joints(model, truth), root)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=1) * 1000.0


def direct_3d_error(model: KinematicModel, dataset: Dataset, truth: list | None = None) -> float:
    """Mean root-relative MPJPE (mm) of a dataset's pseudo ground truth
    against its hidden ground truth."""
    return float(per_sample_3d_error(model, dataset, truth).mean())


def indirect_3d_error(model: KinematicModel, train_star: Dataset, test: Dataset, cfg=None, seed: int = 0,
                      truth: list | None = None, hidden: int = 256) -> float:
    """Train a fresh image-only regressor on the pseudo ground truth of
    ``train_star`` and report its PA-MPJPE (mm) on the held-out ``test`` set."""
    from .annotator import NetConfig, RegressorNet, TrainConfig, annotate_dataset, pose_embedding, train

    if not train_star.annotated:
        raise MissingGroundTruth("training set needs pseudo ground truth")
    truth = ground_truth(test) if truth is None else truth
    if truth is None or not test.samples:
        raise MissingGroundTruth("test set needs hidden ground truth")
    # the pseudo ground truth becomes fully visible 3D supervision
    joints = eval_joints(model, [s.params_star for s in train_star.samples])
    samples = []
    for s, j in zip(train_star.samples, joints):
        t = s.__class__(s.feature, s.p2d, s.vis2d, j, np.ones(len(j), dtype=bool), s.params_star)
        samples.append(t)
    supervised = Dataset("aux", train_star.part, samples, dict(train_star.header))
    emb = pose_embedding(model, [supervised])
    net = RegressorNet(NetConfig.for_model(model, len(samples[0].feature), hidden=hidden, latent_dim=emb.dim),
                       emb, seed=seed)
    train(net, model, [supervised], "tg", cfg or TrainConfig(seed=seed))
    pred = annotate_dataset(net, test.training_view(), "tg", batch_size=256)
    return pa_mpjpe(eval_joints(model, [s.params_star for s in pred.samples]), eval_joints(model, truth))


def report(model: KinematicModel, dataset: Dataset, truth: list | None = None) -> list:
    """Rows ``(metric, value, count)`` for an annotated dataset."""
    rows = []
    truth = ground_truth(dataset) if truth is None else truth
    n = len(dataset.samples)
    if truth is not None and n:
        errs = per_sample_3d_error(model, dataset, truth)
        rows.append(("direct_3d_error", float(errs.mean()), n))
        root = _root(model)
        pred = eval_joints(model, [s.params_star for s in dataset.samples])
        gt = eval_joints(model, truth)
        rows.append(("pa_mpjpe", pa_mpjpe(pred, gt), n))
        rows.append(("pck_auc", pck_auc(root_relative(pred, root), root_relative(gt, root)), n))
    with_2d = [s for s in dataset.samples if s.vis2d.any()]
    if with_2d:
        rows.append(("err2d", mean_err2d(model, dataset), len(with_2d)))
    return rows
