import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, random_rotvec, rel_err
from oracles import quat_from_aa, quat_mul, quat_to_aa
from neuralannot import rotmath
from neuralannot.errors import AmbiguousMean, DegenerateSixD, NotARotation

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
vec6 = st.tuples(*[finite] * 6).map(np.array)


def is_rotation(m, tol=1e-9):
    return np.abs(m.T @ m - np.eye(3)).max() < tol and abs(np.linalg.det(m) - 1) < tol


def test_zero_and_half_turn():
    assert np.array_equal(rotmath.aa_to_mat(np.zeros(3)), np.eye(3))
    np.testing.assert_allclose(rotmath.aa_to_mat([np.pi, 0, 0]), np.diag([1.0, -1, -1]), atol=1e-15)
    np.testing.assert_allclose(rotmath.mat_to_aa(np.eye(3)), 0.0)
    v = rotmath.mat_to_aa(np.diag([1.0, -1, -1]))
    np.testing.assert_allclose(np.abs(v), [np.pi, 0, 0], atol=1e-12)


def test_round_trip_aa(rng):
    v = random_rotvec(rng, 1000)
    np.testing.assert_allclose(rotmath.mat_to_aa(rotmath.aa_to_mat(v)), v, atol=1e-9)


def test_round_trip_near_pi_and_zero(rng):
    axis = rng.normal(size=(50, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    for angle in (1e-12, 1e-9, 1e-6, 1e-4, np.pi - 1e-6, np.pi - 1e-9):
        v = axis * angle
        R = rotmath.aa_to_mat(v)
        np.testing.assert_allclose(rotmath.aa_to_mat(rotmath.mat_to_aa(R)), R, atol=1e-8)


def test_composition_matches_quaternion_oracle(rng):
    a = random_rotvec(rng, 200, 2.0)
    b = random_rotvec(rng, 200, 2.0)
    got = rotmath.mat_to_aa(rotmath.aa_to_mat(a) @ rotmath.aa_to_mat(b))
    want = np.array([quat_to_aa(quat_mul(quat_from_aa(x), quat_from_aa(y))) for x, y in zip(a, b)])
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_mat_to_aa_rejects_non_rotation():
    with pytest.raises(NotARotation):
        rotmath.mat_to_aa(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotARotation):
        rotmath.mat_to_aa(np.eye(3) * 1.001)


def test_sixd_examples():
    np.testing.assert_allclose(rotmath.sixd_to_mat([1, 0, 0, 0, 1, 0]), np.eye(3))
    np.testing.assert_allclose(rotmath.sixd_to_mat([2, 0, 0, 0, 3, 0]), np.eye(3))
    with pytest.raises(DegenerateSixD):
        rotmath.sixd_to_mat([0, 0, 0, 1, 0, 0])
    with pytest.raises(DegenerateSixD):
        rotmath.sixd_to_mat([1, 0, 0, 2, 0, 0])


def test_sixd_random_outputs_are_rotations(rng):
    R = rotmath.sixd_to_mat(rng.normal(size=(1000, 6)))
    err = np.abs(np.swapaxes(R, 1, 2) @ R - np.eye(3)).max()
    assert err < 1e-9
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-9


def test_sixd_idempotent_on_orthonormal_columns(rng):
    R = rotmath.aa_to_mat(random_rotvec(rng, 100))
    np.testing.assert_allclose(rotmath.sixd_to_mat(rotmath.mat_to_sixd(R)), R, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vec6, st.floats(1e-3, 1e3))
def test_sixd_scale_invariance(r, s):
    if np.linalg.norm(r[:3]) < 1e-3 or np.linalg.norm(np.cross(r[:3], r[3:])) < 1e-3 * np.linalg.norm(r[:3]) * max(
            np.linalg.norm(r[3:]), 1e-3):
        return
    assert np.abs(rotmath.sixd_to_mat(r) - rotmath.sixd_to_mat(s * r)).max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_aa_round_trip_property(v):
    R = rotmath.aa_to_mat(v)
    assert is_rotation(R)
    np.testing.assert_allclose(rotmath.aa_to_mat(rotmath.mat_to_aa(R)), R, atol=1e-8)
    assert np.linalg.norm(rotmath.mat_to_aa(R)) <= np.pi + 1e-12


def test_aa_jacobian_matches_finite_differences(rng):
    for v in list(random_rotvec(rng, 20, 3.0)) + [np.array([1e-7, -2e-7, 3e-8]), np.zeros(3)]:
        W = rng.normal(size=(3, 3))
        num = central_diff(lambda x: np.sum(W * rotmath.aa_to_mat(x)), v)
        ana = rotmath.aa_to_mat_vjp(v, W)
        assert rel_err(ana, num) < 1e-4


def test_sixd_jacobian_matches_finite_differences(rng):
    for r in rng.normal(size=(20, 6)):
        W = rng.normal(size=(3, 3))
        num = central_diff(lambda x: np.sum(W * rotmath.sixd_to_mat(x)), r)
        assert rel_err(rotmath.sixd_to_mat_vjp(r, W), num) < 1e-4


def test_angle_sq_vjp(rng):
    for v in random_rotvec(rng, 10, 2.5):
        W = rng.normal()
        R = rotmath.aa_to_mat(v)
        assert rotmath.angle_sq_from_mat(R) == pytest.approx(np.dot(v, v), rel=1e-9)
        # derivative along the manifold: compare through the axis-angle chart
        num = central_diff(lambda x: W * rotmath.angle_sq_from_mat(rotmath.aa_to_mat(x)), v)
        ana = rotmath.aa_to_mat_vjp(v, rotmath.angle_sq_from_mat_vjp(R, W))
        assert rel_err(ana, num) < 1e-4


def test_euler_examples():
    e = rotmath.mat_to_euler(np.eye(3))
    assert (e.roll, e.pitch, e.yaw) == (0.0, 0.0, 0.0)
    e = rotmath.mat_to_euler(rotmath.aa_to_mat([np.pi / 2, 0, 0]))
    np.testing.assert_allclose([e.roll, e.pitch, e.yaw], [np.pi / 2, 0, 0], atol=1e-12)


def test_euler_round_trip(rng):
    for _ in range(500):
        e = (rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3), rng.uniform(-np.pi, np.pi))
        R = rotmath.euler_to_mat(e)
        out = rotmath.mat_to_euler(R)
        assert not out.gimbal_lock
        np.testing.assert_allclose(rotmath.euler_to_mat(out), R, atol=1e-8)
        np.testing.assert_allclose([out.roll, out.pitch, out.yaw], e, atol=1e-7)


def test_euler_gimbal_lock_is_flagged():
    R = rotmath.euler_to_mat((0.4, np.pi / 2, 0.3))
    out = rotmath.mat_to_euler(R)
    assert out.gimbal_lock and out.roll == 0.0
    np.testing.assert_allclose(rotmath.euler_to_mat(out), R, atol=1e-8)


def test_mean_angle():
    assert rotmath.mean_angle(0.2, 0.4) == pytest.approx(0.3)
    assert rotmath.mean_angle(np.pi - 0.1, -np.pi + 0.1) == pytest.approx(np.pi)
    with pytest.raises(AmbiguousMean):
        rotmath.mean_angle(0.0, np.pi)


@settings(max_examples=300, deadline=None)
@given(st.floats(-20, 20), st.floats(-3.0, 3.0))
def test_mean_angle_is_midpoint(a, d):
    m = rotmath.mean_angle(a, a + d)
    assert -np.pi < m <= np.pi
    assert abs(rotmath.wrap_angle(m - (a + d / 2))) < 1e-9


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e3, 1e3))
def test_wrap_angle_range(a):
    w = rotmath.wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert abs(np.sin(w) - np.sin(a)) < 1e-9 and abs(np.cos(w) - np.cos(a)) < 1e-9
