import numpy as np
import pytest

from neuralannot import rotmath, synthdata
from neuralannot.bodymodel import ModelParams, eval_joints, model_forward
from neuralannot.camera import project
from neuralannot.errors import NonFiniteObjective, TooFewJoints
from neuralannot.evalmetrics import mpjpe
from neuralannot.fitter import FitConfig, _Objective3D, fit_2d, fit_3d, fit_3d_batch, fit_dataset
from neuralannot.optim import MinimizeConfig, minimize
from neuralannot.priors import LossWeights, geman_mcclure

from conftest import central_diff, random_rotvec, rel_err

NO_PRIOR = LossWeights(fit={"pose": 0.0, "latent": 0.0, "betas": 0.0, "expression": 0.0})


def _quadratic():
    A = np.array([[3.0, 0.5, 0.0], [0.5, 2.0, 0.3], [0.0, 0.3, 1.0]])
    b = np.array([1.0, -2.0, 0.5])
    return A, b, np.linalg.solve(A, b)


def test_minimize_quadratic_oracle():
    A, b, x_star = _quadratic()

    def f(p):
        r = p["x"] - x_star
        return 0.5 * r @ A @ r, {"x": A @ r}

    res = minimize(f, {"x": np.zeros(3)}, MinimizeConfig(max_iters=2000, lr=0.1, tol=0.0, regrow=1.2))
    assert res.n_iters <= 2000
    np.testing.assert_allclose(res.params["x"], x_star, atol=1e-6)
    assert np.all(np.diff(res.trace) <= 0)


def test_minimize_optimal_start_takes_no_step():
    A, b, x_star = _quadratic()

    def f(p):
        x = p["x"]
        r = x - x_star
        return 0.5 * r @ A @ r, {"x": A @ r}

    res = minimize(f, {"x": x_star.copy()})
    assert res.n_accepted == 0 and res.converged


def test_minimize_non_finite():
    with pytest.raises(NonFiniteObjective):
        minimize(lambda p: (np.nan, {"x": np.zeros(1)}), {"x": np.zeros(1)})

    def blows_up(p):
        x = p["x"]
        return (1.0 - x[0] if x[0] < 0.5 else np.inf), {"x": np.array([-1.0])}

    with pytest.raises(NonFiniteObjective) as info:
        minimize(blows_up, {"x": np.zeros(1)}, MinimizeConfig(lr=1.0))
    assert info.value.args


def _targets(model, n, seed, noise=0.0, missing=0.0):
    ds = synthdata.gen_dataset(model, n, "aux", synthdata.Corruption(noise3d=noise, missing3d=missing), seed=seed)
    return ds, np.stack([s.p3d for s in ds.samples]), np.stack([s.vis3d for s in ds.samples])


def test_objective_gradient(body_model, rng):
    _, p3d, vis = _targets(body_model, 1, 3)
    # a wide robust scale keeps random poses out of the saturated regime,
    # where the objective is flat and differences lose their digits
    cfg = FitConfig(sigma=5.0)
    R0 = rotmath.aa_to_mat(random_rotvec(rng, 1))
    obj = _Objective3D(body_model, p3d + 0.02 * rng.normal(size=p3d.shape), vis, cfg, R0, rng.normal(size=(1, 3)))
    idx = np.array([0])
    for _ in range(4):
        x = {
            "global_rot": random_rotvec(rng, 1, 2.0),
            "joint_rots": random_rotvec(rng, 21, 0.5)[None],
            "betas": rng.normal(size=(1, 10)),
            "expression": np.zeros((1, 10)),
            "omega": 0.1 * rng.normal(size=(1, 3)),
            "delta": 0.1 * rng.normal(size=(1, 3)),
        }
        _, g = obj(x, idx)
        for k in ["global_rot", "joint_rots", "betas", "omega", "delta"]:
            num = central_diff(lambda v: float(obj({**x, k: v}, idx)[0][0]), x[k])
            assert rel_err(g[k], num) < 1e-4, k


def test_fit_3d_recovers_noiseless_targets(body_model):
    ds, p3d, vis = _targets(body_model, 6, 11)
    reports = fit_3d_batch(body_model, p3d, vis, FitConfig(weights=NO_PRIOR))
    fitted = eval_joints(body_model, [r.params for r in reports])
    truth = eval_joints(body_model, ds.sealed)
    for r, f, t, target in zip(reports, fitted, truth, p3d):
        assert np.all(np.diff(r.trace) <= 0)
        assert r.objective <= r.initial_objective
        assert mpjpe(f - f[0], t - t[0]) < 1.0
        # the reported translation places the result in the target frame
        assert mpjpe(f + r.extrinsics.t, target) < 0.1
        assert r.terms["data"] / NO_PRIOR.w_data < 1e-7  # summed squared residual, m^2


def test_fit_3d_zero_pose_converges_immediately(hand_model):
    target = model_forward(hand_model, ModelParams.zeros("hand")).joints3d
    r = fit_3d(hand_model, target)
    assert r.objective < 1e-14
    assert len(r.trace) == 1
    assert r.n_iters == 0


def test_outlier_contribution_is_capped(body_model):
    ds, p3d, vis = _targets(body_model, 1, 5)
    target = p3d[0].copy()
    target[7] += np.array([1.0, 0.0, 0.0])
    cfg = FitConfig()
    r = fit_3d(body_model, target, cfg=cfg)
    R, t = r.extrinsics
    joints = model_forward(body_model, r.params).joints3d + t
    e = np.linalg.norm(joints - target, axis=1)
    contrib = cfg.weights.w_data * geman_mcclure(e[7], cfg.sigma)
    assert contrib <= cfg.weights.w_data * cfg.sigma**2
    # the rest of the body is not dragged towards the outlier
    others = np.delete(np.arange(body_model.n_eval), 7)
    assert np.mean(e[others]) < 0.005


def test_fit_3d_equivariant(body_model, rng):
    _, p3d, vis = _targets(body_model, 1, 8)
    R = rotmath.aa_to_mat(random_rotvec(rng, 1)[0])
    moved = p3d[0] @ R.T + rng.normal(size=3)
    cfg = FitConfig(weights=NO_PRIOR)
    a = fit_3d(body_model, p3d[0], cfg=cfg)
    b = fit_3d(body_model, moved, cfg=cfg)
    diff = rotmath.mat_to_aa(np.swapaxes(rotmath.aa_to_mat(a.params.joint_rots), -1, -2)
                             @ rotmath.aa_to_mat(b.params.joint_rots))
    assert np.max(np.linalg.norm(diff, axis=1)) < 1e-4


def test_zero_data_weight_gives_prior_minimizer(body_model):
    _, p3d, _ = _targets(body_model, 1, 9)
    cfg = FitConfig(weights=LossWeights(w_data=0.0))
    init = ModelParams("body", np.zeros(3), 0.3 * np.ones((21, 3)), np.ones(10), np.zeros(10), np.ones(3))
    cfg.init = init
    r = fit_3d(body_model, p3d[0], cfg=cfg)
    assert np.max(np.abs(r.params.joint_rots)) < 1e-6
    assert np.max(np.abs(r.params.betas)) < 1e-6


def test_fit_3d_too_few_joints(body_model):
    _, p3d, _ = _targets(body_model, 1, 2)
    vis = np.zeros(body_model.n_eval, dtype=bool)
    vis[:2] = True
    with pytest.raises(TooFewJoints):
        fit_3d(body_model, p3d[0], vis)


def test_fit_2d_reprojection(hand_model, rng):
    truth = ModelParams("hand", random_rotvec(rng, 1, 0.5)[0], random_rotvec(rng, 15, 0.3), rng.normal(size=10),
                        np.zeros(10), np.array([900.0, 128.0, 120.0]))
    p2d = project(model_forward(hand_model, truth).joints3d, truth.camera)
    init = ModelParams.zeros("hand", camera=truth.camera)
    r = fit_2d(hand_model, p2d, cfg=FitConfig(weights=NO_PRIOR, init=init, sigma_2d=10.0))
    proj = project(model_forward(hand_model, r.params).joints3d, r.params.camera)
    err = np.linalg.norm(proj - p2d, axis=1).mean()
    assert err < 0.5
    init_err = np.linalg.norm(project(model_forward(hand_model, init).joints3d, init.camera) - p2d, axis=1).mean()
    assert err <= init_err
    assert np.all(np.diff(r.trace) <= 0)


def test_fit_2d_invisible(hand_model):
    with pytest.raises(TooFewJoints):
        fit_2d(hand_model, np.zeros((21, 2)), np.zeros(21, dtype=bool))


def test_fit_dataset_independent_of_chunking(face_model):
    ds = synthdata.gen_dataset(face_model, 5, "aux", synthdata.Corruption(noise3d=0.001), seed=4)
    cfg = FitConfig(stage_iters=(10, 20), refine_iters=5)
    a = fit_dataset(face_model, ds, "3d", cfg, chunk=5)
    b = fit_dataset(face_model, ds, "3d", cfg, chunk=2, jobs=2)
    for p, q in zip(a, b):
        np.testing.assert_allclose(p.pose, q.pose, atol=1e-10)
        np.testing.assert_allclose(p.expression, q.expression, atol=1e-10)
    with pytest.raises(ValueError):
        fit_dataset(face_model, ds, "4d")
