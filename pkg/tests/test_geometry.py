import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import rotmat
from splatrack.geometry import (
    axis_angle_to_quat,
    camera_center,
    make_pose,
    orthonormalize,
    pose_inverse,
    quat_conjugate,
    quat_multiply,
    quat_multiply_backward,
    quat_to_rotmat,
    quat_to_rotmat_backward,
    rotmat_to_quat,
    so3_exp,
    so3_log,
)
from oracles import central_difference, rel_err

finite = st.floats(-3, 3, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
quat = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 0.1)


@given(quat, quat)
def test_quaternion_product_matches_rotation_composition(a, b):
    np.testing.assert_allclose(quat_to_rotmat(quat_multiply(a, b) / np.linalg.norm(a) / np.linalg.norm(b)),
                               rotmat(a) @ rotmat(b), atol=1e-9)


@given(quat)
def test_rotmat_is_orthonormal_and_matches_reference(q):
    r = quat_to_rotmat(q)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(r), 1.0)
    np.testing.assert_allclose(r, rotmat(q), atol=1e-12)


@given(quat)
def test_rotmat_to_quat_round_trip(q):
    back = rotmat_to_quat(quat_to_rotmat(q))
    np.testing.assert_allclose(quat_to_rotmat(back), quat_to_rotmat(q), atol=1e-9)


@given(arrays(np.float64, 3, elements=st.floats(-3.0, 3.0)))
def test_so3_log_inverts_exp(omega):
    r = so3_exp(omega)
    np.testing.assert_allclose(so3_exp(so3_log(r)), r, atol=1e-8)


def test_so3_exp_quarter_turn():
    np.testing.assert_allclose(so3_exp([0, 0, np.pi / 2]), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_so3_log_near_half_turn():
    omega = np.array([0.0, np.pi - 1e-9, 0.0])
    np.testing.assert_allclose(so3_exp(so3_log(so3_exp(omega))), so3_exp(omega), atol=1e-7)


def test_axis_angle_and_conjugate():
    q = axis_angle_to_quat([0, 0, 2], np.pi / 2)
    np.testing.assert_allclose(q, [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(quat_multiply(q, quat_conjugate(q)), [1, 0, 0, 0], atol=1e-15)


@settings(max_examples=30)
@given(vec3, vec3)
def test_pose_inverse_and_center(omega, t):
    pose = make_pose(so3_exp(omega), t)
    np.testing.assert_allclose(pose @ pose_inverse(pose), np.eye(4), atol=1e-10)
    c = camera_center(pose)
    np.testing.assert_allclose(pose[:3, :3] @ c + pose[:3, 3], 0, atol=1e-10)


def test_orthonormalize_projects_to_so3(rng):
    r = so3_exp([0.3, -0.2, 0.1]) + 1e-3 * rng.normal(size=(3, 3))
    out = orthonormalize(r)
    np.testing.assert_allclose(out @ out.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(out) > 0
    assert np.abs(out - r).max() < 1e-2


def test_rotation_backward_matches_finite_differences(rng):
    q = rng.normal(size=4)
    g = rng.normal(size=(3, 3))
    fd = central_difference(lambda x: np.sum(g * quat_to_rotmat(x)), q, eps=1e-6)
    assert rel_err(quat_to_rotmat_backward(q, g), fd) < 1e-6


def test_product_backward_matches_finite_differences(rng):
    a, b, g = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
    da, db = quat_multiply_backward(a, b, g)
    assert rel_err(da, central_difference(lambda x: g @ quat_multiply(x, b), a, 1e-6)) < 1e-8
    assert rel_err(db, central_difference(lambda x: g @ quat_multiply(a, x), b, 1e-6)) < 1e-8
