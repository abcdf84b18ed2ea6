"""Tests for rigid-transform math and covariance propagation."""

import numpy as np
import pytest

from fwnav import se3
from fwnav.se3 import (
    GaussianPoint,
    Pose,
    compose,
    invert,
    propagate_covariance,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_to_matrix,
    right_jacobian,
    rotvec_rate_matrix,
    skew,
    transform_point,
    transform_points,
)


def random_pose(rng):
    axis = rng.normal(size=3)
    angle = rng.uniform(-np.pi, np.pi)
    return Pose.from_axis_angle(axis, angle, rng.normal(scale=5.0, size=3))


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_compose_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        m1 = compose(compose(a, b), c).matrix()
        m2 = compose(a, compose(b, c)).matrix()
        np.testing.assert_allclose(m1, m2, atol=1e-12)


def test_invert_roundtrip():
    rng = np.random.default_rng(2)
    for _ in range(30):
        p = random_pose(rng)
        np.testing.assert_allclose(compose(p, invert(p)).matrix(), np.eye(4), atol=1e-12)
        np.testing.assert_allclose(compose(invert(p), p).matrix(), np.eye(4), atol=1e-12)


def test_transform_point_preserves_distance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_pose(rng)
        x, y = rng.normal(size=3), rng.normal(size=3)
        d0 = np.linalg.norm(x - y)
        d1 = np.linalg.norm(transform_point(p, x) - transform_point(p, y))
        assert d1 == pytest.approx(d0, abs=1e-12)


def test_transform_points_matches_scalar():
    rng = np.random.default_rng(4)
    p = random_pose(rng)
    xs = rng.normal(size=(40, 3))
    batch = transform_points(p, xs)
    for i in range(len(xs)):
        np.testing.assert_allclose(batch[i], transform_point(p, xs[i]), atol=1e-12)
    assert transform_points(p, np.zeros((0, 3))).shape == (0, 3)


def test_quat_exp_log_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(50):
        th = rng.normal(size=3)
        th *= rng.uniform(0.0, 3.0) / max(np.linalg.norm(th), 1e-9)
        np.testing.assert_allclose(quat_log(quat_exp(th)), th, atol=1e-9)
    np.testing.assert_allclose(quat_exp(np.zeros(3)), [1, 0, 0, 0], atol=0)


def test_quat_exp_matches_rodrigues():
    rng = np.random.default_rng(6)
    for _ in range(20):
        th = rng.normal(size=3)
        a = np.linalg.norm(th)
        k = skew(th / a)
        rodrigues = np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)
        np.testing.assert_allclose(quat_to_matrix(quat_exp(th)), rodrigues, atol=1e-12)


def test_right_jacobian_is_exp_derivative():
    # exp(theta + d) ~= exp(theta) exp(Jr(theta) d) to first order in d
    rng = np.random.default_rng(7)
    for _ in range(20):
        th = rng.normal(size=3)
        d = 1e-6 * rng.normal(size=3)
        lhs = quat_to_matrix(quat_exp(th + d))
        rhs = quat_to_matrix(quat_exp(th)) @ quat_to_matrix(quat_exp(right_jacobian(th) @ d))
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_rotvec_rate_matrix_inverts_right_jacobian():
    rng = np.random.default_rng(8)
    for _ in range(30):
        th = rng.normal(size=3) * rng.uniform(0, 2.5)
        np.testing.assert_allclose(rotvec_rate_matrix(th) @ right_jacobian(th), np.eye(3), atol=1e-9)
    # series branch agrees with closed form near the switch point
    for s in (1e-7, 1e-6, 2e-6):
        th = np.array([np.sqrt(s), 0.0, 0.0])
        g_series = se3.rotvec_rate_coeff(0.5e-6)[0]
        assert se3.rotvec_rate_coeff(s)[0] == pytest.approx(g_series, rel=1e-4)


def test_rotvec_rate_matches_finite_difference_quaternion_rate():
    # d/dt log(q0^-1 * q(t)) at t=0 with body rate w should equal Jr_inv(th) w
    rng = np.random.default_rng(9)
    for _ in range(20):
        th = rng.normal(size=3)
        th *= rng.uniform(0.1, 2.8) / np.linalg.norm(th)  # stay below the pi branch cut
        w = rng.normal(size=3)
        q = quat_exp(th)
        h = 1e-7
        qdot = 0.5 * quat_multiply(q, np.concatenate(([0.0], w)))
        th_plus = quat_log(q + h * qdot)
        fd = (th_plus - th) / h
        np.testing.assert_allclose(rotvec_rate_matrix(th) @ w, fd, atol=1e-5)


def test_gaussian_point_validation():
    g = GaussianPoint([1, 2, 3], [0.1, 0.2, 0.3])
    np.testing.assert_allclose(g.covariance, np.diag([0.1, 0.2, 0.3]))
    with pytest.raises(ValueError):
        GaussianPoint([0, 0, 0], np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]))
    assert GaussianPoint.exact([1, 1, 1]).covariance.sum() == 0.0


def test_pose_immutable():
    p = Pose()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


def test_propagate_covariance_single_edge_rotates_nothing():
    rng = np.random.default_rng(10)
    cov = np.diag([0.1, 0.2, 0.3])
    p = random_pose(rng)
    # first edge's covariance is already in the root frame
    np.testing.assert_allclose(propagate_covariance([(p, cov)]), cov, atol=1e-12)


def test_propagate_covariance_two_edges_analytic():
    axis, angle = np.array([0.0, 0.0, 1.0]), np.pi / 2
    p1 = Pose.from_axis_angle(axis, angle, [1.0, 0.0, 0.0])
    p2 = Pose.from_axis_angle(axis, 0.0, [0.0, 2.0, 0.0])
    c1 = np.diag([0.1, 0.0, 0.0])
    c2 = np.diag([0.4, 0.0, 0.0])
    # edge-2 x-covariance is rotated into the root y-axis by p1's 90 deg yaw
    out = propagate_covariance([(p1, c1), (p2, c2)])
    np.testing.assert_allclose(out, np.diag([0.1, 0.4, 0.0]), atol=1e-12)


def test_propagate_covariance_monte_carlo_oracle():
    """Chain translation covariance against a direct sampling experiment."""
    rng = np.random.default_rng(11)
    chain = []
    for _ in range(4):
        pose = random_pose(rng)
        a = rng.normal(size=(3, 3)) * 0.1
        chain.append((pose, a @ a.T + 0.01 * np.eye(3)))
    predicted = propagate_covariance(chain)

    # sample perturbed chains directly: t_total = sum_k R_prefix_k (t_k + e_k)
    n = 200_000
    samp_rng = np.random.default_rng(12)
    t_samples = np.zeros((n, 3))
    prefix = np.eye(3)
    for pose, cov in chain:
        noise = samp_rng.multivariate_normal(np.zeros(3), cov, size=n)
        t_samples += (pose.translation + noise) @ prefix.T
        prefix = prefix @ pose.rotation_matrix()
    # spot-check the vectorized accumulation against Pose composition
    total = Pose.identity()
    for pose, _ in chain:
        total = compose(total, pose)
    np.testing.assert_allclose(t_samples.mean(axis=0), total.translation, atol=0.05)
    empirical = np.cov(t_samples.T)
    # sampling std-err of covariance entries ~ cov_scale / sqrt(n)
    scale = np.trace(predicted) / 3.0
    np.testing.assert_allclose(empirical, predicted, atol=8.0 * scale / np.sqrt(n) * np.sqrt(2) * 3)
    assert np.all(np.linalg.eigvalsh(predicted) >= -1e-12)
