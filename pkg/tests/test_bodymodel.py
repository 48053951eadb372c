import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralannot import rotmath, synthdata
from neuralannot.bodymodel import (
    N_EXPR,
    N_SHAPE,
    PART_JOINTS,
    KinematicModel,
    ModelLayer,
    ModelParams,
    backward_from_aa,
    eval_joints,
    flip_hand,
    forward_from_aa,
    forward_kinematics,
    load_model,
    local_from_global,
    model_forward,
    read_obj,
    save_model,
    shape_rest,
    skin,
    write_obj,
)
from neuralannot.errors import DimensionMismatch, NotARotation, WrongPart

from conftest import central_diff, random_rotvec, rel_err
from oracles import fk_recursive


def random_params(model, rng, angle=0.8, shape=1.0):
    J = model.n_joints
    expr = rng.normal(size=N_EXPR) if model.part_kind == "face" else np.zeros(N_EXPR)
    return ModelParams(model.part_kind, random_rotvec(rng, 1, np.pi - 1e-3)[0],
                       random_rotvec(rng, J - 1, angle), shape * rng.normal(size=N_SHAPE), expr,
                       np.array([100.0, 128.0, 128.0]))


def test_structure(any_model):
    any_model.validate()
    assert any_model.n_joints == PART_JOINTS[any_model.part_kind]
    assert any_model.parents[0] == -1
    for arr in (any_model.skin_weights, any_model.joint_regressor, any_model.external_regressor):
        assert arr.min() >= 0
        np.testing.assert_allclose(arr.sum(axis=1), 1.0, atol=1e-9)


def test_joint_counts(body_model, hand_model, face_model):
    assert (body_model.n_joints, hand_model.n_joints, face_model.n_joints) == (22, 16, 2)
    assert body_model.n_eval == 17 and hand_model.n_eval == 21


def test_validate_rejects_cycle(hand_model):
    parents = hand_model.parents.copy()
    parents[1] = 2
    parents[2] = 1
    bad = KinematicModel(hand_model.part_kind, hand_model.template, parents, hand_model.shape_basis,
                         hand_model.expression_basis, hand_model.skin_weights, hand_model.joint_regressor,
                         hand_model.external_regressor)
    with pytest.raises(ValueError):
        bad.validate()


def test_shape_rest_examples(body_model, rng):
    v0, j0 = shape_rest(body_model)
    np.testing.assert_array_equal(v0, body_model.template)
    e1 = np.eye(N_SHAPE)[0]
    v1, _ = shape_rest(body_model, e1)
    np.testing.assert_allclose(v1, body_model.template + body_model.shape_basis[:, :, 0], atol=1e-15)
    a, b = rng.normal(size=N_SHAPE), rng.normal(size=N_SHAPE)
    va, ja = shape_rest(body_model, a)
    vb, jb = shape_rest(body_model, b)
    vab, jab = shape_rest(body_model, a + b)
    np.testing.assert_allclose(vab, va + vb - body_model.template, atol=1e-12)
    np.testing.assert_allclose(jab, ja + jb - j0, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        shape_rest(body_model, np.zeros(3))


def test_fk_zero_is_identity_on_rest(any_model):
    _, rest = shape_rest(any_model)
    jg = forward_kinematics(any_model, np.zeros(3), np.zeros((any_model.n_joints - 1, 3)), rest)
    np.testing.assert_array_equal(jg.positions, rest)


def test_fk_half_turn_about_x(body_model):
    _, rest = shape_rest(body_model)
    jg = forward_kinematics(body_model, np.array([np.pi, 0, 0]), np.zeros((21, 3)), rest)
    flipped = (rest - rest[0]) @ np.diag([1.0, -1.0, -1.0]) + rest[0]
    np.testing.assert_allclose(jg.positions, flipped, atol=1e-12)


def test_fk_matches_recursive_oracle(any_model, rng):
    for _ in range(10):
        p = random_params(any_model, rng)
        _, rest = shape_rest(any_model, p.betas, p.expression)
        jg = forward_kinematics(any_model, p.global_rot, p.joint_rots, rest)
        R = rotmath.aa_to_mat(p.pose)
        for j in range(any_model.n_joints):
            G, pos = fk_recursive(any_model.parents, R, rest, j)
            np.testing.assert_allclose(jg.rots[j], G, atol=1e-10)
            np.testing.assert_allclose(jg.positions[j], pos, atol=1e-10)


def test_local_from_global_round_trip(any_model, rng):
    for _ in range(10):
        p = random_params(any_model, rng)
        _, rest = shape_rest(any_model)
        jg = forward_kinematics(any_model, p.global_rot, p.joint_rots, rest)
        g, loc = local_from_global(any_model, jg.rots)
        np.testing.assert_allclose(g, p.global_rot, atol=1e-9)
        np.testing.assert_allclose(loc, p.joint_rots, atol=1e-9)
        again = forward_kinematics(any_model, g, loc, rest)
        np.testing.assert_allclose(again.rots, jg.rots, atol=1e-9)


def test_local_from_global_identity_and_errors(body_model):
    eye = np.broadcast_to(np.eye(3), (22, 3, 3))
    g, loc = local_from_global(body_model, eye)
    assert np.all(g == 0) and np.all(loc == 0)
    bad = eye.copy()
    bad[3] = 2 * np.eye(3)
    with pytest.raises(NotARotation):
        local_from_global(body_model, bad)


def test_child_equal_to_parent_gives_identity_local(body_model, rng):
    G = rotmath.aa_to_mat(random_rotvec(rng, 22))
    j = 5
    G[j] = G[body_model.parents[j]]
    _, loc = local_from_global(body_model, G)
    np.testing.assert_allclose(loc[j - 1], 0.0, atol=1e-12)


def test_skin_examples(hand_model, rng):
    verts, rest = shape_rest(hand_model)
    J = hand_model.n_joints
    jg = forward_kinematics(hand_model, np.zeros(3), np.zeros((J - 1, 3)), rest)
    np.testing.assert_allclose(skin(hand_model, verts, jg), verts, atol=1e-14)
    g = random_rotvec(rng, 1)[0]
    jg = forward_kinematics(hand_model, g, np.zeros((J - 1, 3)), rest)
    R = rotmath.aa_to_mat(g)
    expect = (verts - rest[0]) @ R.T + rest[0]
    np.testing.assert_allclose(skin(hand_model, verts, jg), expect, atol=1e-12)


def test_one_hot_weights_follow_single_bone(hand_model, rng):
    N, J = hand_model.n_verts, hand_model.n_joints
    bone = rng.integers(0, J, size=N)
    W = np.eye(J)[bone]
    m = KinematicModel("hand", hand_model.template, hand_model.parents, hand_model.shape_basis,
                       hand_model.expression_basis, W, hand_model.joint_regressor, hand_model.external_regressor)
    p = random_params(m, rng)
    verts, rest = shape_rest(m)
    jg = forward_kinematics(m, p.global_rot, p.joint_rots, rest)
    posed = skin(m, verts, jg)
    for v in range(0, N, 7):
        j = bone[v]
        G, pos = fk_recursive(m.parents, rotmath.aa_to_mat(p.pose), rest, j)
        np.testing.assert_allclose(posed[v], G @ (verts[v] - rest[j]) + pos, atol=1e-12)


def test_model_forward_zero_and_regressor(any_model):
    p = ModelParams.zeros(any_model.part_kind)
    out = model_forward(any_model, p)
    np.testing.assert_allclose(out.vertices, any_model.template, atol=1e-14)
    np.testing.assert_allclose(out.joints3d, any_model.external_regressor @ any_model.template, atol=1e-14)


def test_joints_regressed_from_vertices(any_model, rng):
    out = model_forward(any_model, random_params(any_model, rng))
    np.testing.assert_array_equal(out.joints3d, any_model.external_regressor @ out.vertices)


def test_layer_matches_model_forward(any_model, rng):
    ps = [random_params(any_model, rng) for _ in range(4)]
    batched = eval_joints(any_model, ps)
    layer = ModelLayer(any_model)
    pose = np.stack([p.pose for p in ps])
    verts, _ = forward_from_aa(layer, pose, np.stack([p.betas for p in ps]),
                               np.stack([p.expression for p in ps]), vertices=True)
    for i, p in enumerate(ps):
        out = model_forward(any_model, p)
        np.testing.assert_allclose(batched[i], out.joints3d, atol=1e-12)
        np.testing.assert_allclose(verts[i], out.vertices, atol=1e-12)


def test_gradient_matches_finite_differences(any_model, rng):
    layer = ModelLayer(any_model)
    for _ in range(3):
        p = random_params(any_model, rng)
        w = rng.normal(size=(any_model.n_eval, 3))

        def scalar(pose, betas, expr):
            q = ModelParams(p.part, pose[0], pose[1:], betas, expr, p.camera)
            return float(np.sum(model_forward(any_model, q).joints3d * w))

        out, cache = forward_from_aa(layer, p.pose[None], p.betas[None], p.expression[None])
        g_pose, g_betas, g_expr = backward_from_aa(layer, cache, w[None])
        num_pose = central_diff(lambda x: scalar(x, p.betas, p.expression), p.pose)
        num_betas = central_diff(lambda x: scalar(p.pose, x, p.expression), p.betas)
        assert rel_err(g_pose[0], num_pose) < 1e-4
        assert rel_err(g_betas[0], num_betas) < 1e-4
        if any_model.part_kind == "face":
            num_expr = central_diff(lambda x: scalar(p.pose, p.betas, x), p.expression)
            assert rel_err(g_expr[0], num_expr) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_joints_inside_vertex_bounds(seed):
    model = _MODELS["body"]
    out = model_forward(model, random_params(model, np.random.default_rng(seed), angle=1.5, shape=2.0))
    lo, hi = out.vertices.min(axis=0), out.vertices.max(axis=0)
    assert np.all(out.joints3d >= lo - 1e-12) and np.all(out.joints3d <= hi + 1e-12)


_MODELS = {"body": synthdata.gen_model(0, "body")}


def test_params_dimensions():
    with pytest.raises(DimensionMismatch):
        ModelParams("body", np.zeros(3), np.zeros((15, 3)), np.zeros(10), np.zeros(10), np.zeros(3))
    with pytest.raises(DimensionMismatch):
        ModelParams("hand", np.zeros(3), np.zeros((15, 3)), np.zeros(9), np.zeros(10), np.zeros(3))
    p = ModelParams.zeros("face")
    assert p.joint_rots.shape == (1, 3)
    q = ModelParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(q.pose, p.pose)
    np.testing.assert_array_equal(q.camera, p.camera)


def _mirror_symmetric_hand(hand):
    """A hand whose mesh is its own mirror image across x = 0; joints are
    regressed symmetrically so every pivot lies on the mirror plane."""
    M = np.diag([-1.0, 1.0, 1.0])
    N = hand.n_verts
    return KinematicModel(
        "hand",
        np.vstack([hand.template, hand.template @ M]),
        hand.parents,
        np.concatenate([hand.shape_basis, np.einsum("cd,nds->ncs", M, hand.shape_basis)]),
        np.zeros((2 * N, 3, N_EXPR)),
        np.vstack([hand.skin_weights, hand.skin_weights]),
        np.hstack([hand.joint_regressor, hand.joint_regressor]) / 2,
        np.hstack([hand.external_regressor, hand.external_regressor]) / 2,
    )


def test_flip_hand(hand_model, rng):
    zero = ModelParams.zeros("hand")
    np.testing.assert_array_equal(flip_hand(zero).pose, zero.pose)
    p = random_params(hand_model, rng)
    back = flip_hand(flip_hand(p))
    np.testing.assert_array_equal(back.pose, p.pose)
    np.testing.assert_array_equal(flip_hand(p).global_rot, p.global_rot * [1, -1, -1])
    with pytest.raises(WrongPart):
        flip_hand(ModelParams.zeros("body"))


def test_flip_hand_mirrors_mesh(hand_model, rng):
    sym = _mirror_symmetric_hand(hand_model)
    sym.validate()
    N = hand_model.n_verts
    M = np.diag([-1.0, 1.0, 1.0])
    for _ in range(5):
        p = random_params(sym, rng)
        out = model_forward(sym, p)
        mirrored = model_forward(sym, flip_hand(p))
        np.testing.assert_allclose(mirrored.joints3d, out.joints3d @ M, atol=1e-12)
        np.testing.assert_allclose(mirrored.vertices[:N], out.vertices[N:] @ M, atol=1e-12)


def test_model_file_round_trip(tmp_path, face_model):
    path = tmp_path / "face.json"
    save_model(face_model, path)
    loaded = load_model(path)
    assert loaded.digest() == face_model.digest()
    p = random_params(face_model, np.random.default_rng(3))
    np.testing.assert_array_equal(model_forward(loaded, p).vertices, model_forward(face_model, p).vertices)


def test_obj_round_trip(tmp_path, hand_model):
    path = tmp_path / "hand.obj"
    write_obj(path, hand_model.template, hand_model.faces)
    v, f = read_obj(path)
    np.testing.assert_allclose(v, hand_model.template, atol=1e-6)
    np.testing.assert_array_equal(f, hand_model.faces)
