import math

import numpy as np
import pytest

from fleetslam.geometry import (Pose2, between, check_covariance, compose,
                                fit_rigid, fit_similarity, inverse,
                                pose_norm, transform_point, transform_points,
                                wrap_angle)
from oracles import matrix_chain, pose_matrix, pose_of_matrix


def random_pose(rng) -> Pose2:
    return Pose2(rng.uniform(-10, 10), rng.uniform(-10, 10),
                 rng.uniform(-math.pi, math.pi))


def assert_pose_close(a: Pose2, b: Pose2, tol: float = 1e-9):
    assert abs(a.x - b.x) <= tol
    assert abs(a.y - b.y) <= tol
    assert abs(wrap_angle(a.theta - b.theta)) <= tol


class TestWrapAngle:
    def test_identity_range(self):
        assert wrap_angle(0.0) == 0.0
        assert wrap_angle(1.0) == 1.0

    def test_wraps_to_half_open_interval(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        assert wrap_angle(2 * math.pi) == pytest.approx(0.0, abs=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for theta in rng.uniform(-50, 50, 200):
            w = wrap_angle(theta)
            assert wrap_angle(w) == w
            assert -math.pi < w <= math.pi


class TestPose2:
    def test_normalizes_on_construction(self):
        p = Pose2(0.0, 0.0, 3 * math.pi)
        assert p.theta == pytest.approx(math.pi)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = random_pose(rng)
            assert_pose_close(Pose2.from_matrix(p.matrix()), p)

    def test_array_round_trip(self):
        p = Pose2(1.5, -2.0, 0.3)
        assert_pose_close(Pose2.from_array(p.as_array()), p)


class TestGroupLaws:
    def test_identity_compose(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = random_pose(rng)
            assert_pose_close(compose(Pose2(), p), p)
            assert_pose_close(compose(p, Pose2()), p)

    def test_inverse_cancels(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p = random_pose(rng)
            assert_pose_close(compose(p, inverse(p)), Pose2(), tol=1e-12)
            assert_pose_close(compose(inverse(p), p), Pose2(), tol=1e-12)

    def test_associativity(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b, c = (random_pose(rng) for _ in range(3))
            assert_pose_close(compose(compose(a, b), c),
                              compose(a, compose(b, c)))

    def test_compose_matches_matrix_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = random_pose(rng), random_pose(rng)
            got = compose(a, b)
            want = pose_of_matrix(matrix_chain(
                pose_matrix(a.x, a.y, a.theta),
                pose_matrix(b.x, b.y, b.theta)))
            assert_pose_close(got, Pose2(*want))

    def test_hand_worked_compose(self):
        got = compose(Pose2(1, 0, math.pi / 2), Pose2(1, 0, 0))
        assert_pose_close(got, Pose2(1, 1, math.pi / 2))

    def test_hand_worked_inverse(self):
        assert_pose_close(inverse(Pose2()), Pose2())
        assert_pose_close(inverse(Pose2(1, 0, 0)), Pose2(-1, 0, 0))
        assert_pose_close(inverse(Pose2(1, 1, math.pi / 2)),
                          Pose2(-1, 1, -math.pi / 2))

    def test_between(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            assert_pose_close(compose(a, between(a, b)), b)


class TestTransform:
    def test_identity(self):
        np.testing.assert_allclose(
            transform_point(Pose2(), (3.0, 4.0)), [3.0, 4.0])

    def test_half_turn(self):
        np.testing.assert_allclose(
            transform_point(Pose2(0, 0, math.pi), (1.0, 0.0)), [-1.0, 0.0],
            atol=1e-12)

    def test_hand_worked(self):
        np.testing.assert_allclose(
            transform_point(Pose2(2, 1, math.pi / 2), (1.0, 0.0)),
            [2.0, 2.0], atol=1e-12)

    def test_compose_action(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            q = rng.uniform(-5, 5, 2)
            np.testing.assert_allclose(
                transform_point(compose(a, b), q),
                transform_point(a, transform_point(b, q)), atol=1e-9)

    def test_points_batch_matches_single(self):
        rng = np.random.default_rng(8)
        p = random_pose(rng)
        pts = rng.uniform(-5, 5, (20, 2))
        batch = transform_points(p, pts)
        for i in range(20):
            np.testing.assert_allclose(batch[i], transform_point(p, pts[i]))


class TestPoseNorm:
    def test_zero(self):
        assert pose_norm(Pose2()) == 0.0

    def test_euclidean(self):
        assert pose_norm(Pose2(3, 4, 0)) == pytest.approx(5.0)

    def test_angle_unit_scale(self):
        assert pose_norm(Pose2(0, 0, 0.1)) == pytest.approx(0.1)

    def test_angle_scale(self):
        assert pose_norm(Pose2(0, 0, 0.1), angle_scale=4.0) == \
            pytest.approx(0.2)

    def test_weighted_is_mahalanobis(self):
        cov = np.diag([4.0, 1.0, 0.25])
        assert pose_norm(Pose2(2, 0, 0), weight=cov) == pytest.approx(1.0)
        assert pose_norm(Pose2(0, 0, 0.5), weight=cov) == pytest.approx(1.0)

    def test_singular_weight_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            pose_norm(Pose2(1, 0, 0), weight=np.zeros((3, 3)))


class TestCovariance:
    def test_accepts_psd(self):
        check_covariance(np.diag([1.0, 2.0, 3.0]))
        check_covariance(np.zeros((3, 3)))

    def test_rejects_asymmetric(self):
        m = np.diag([1.0, 1.0, 1.0])
        m[0, 1] = 0.5
        with pytest.raises(ValueError):
            check_covariance(m)

    def test_rejects_negative_definite(self):
        with pytest.raises(ValueError):
            check_covariance(np.diag([1.0, -1.0, 1.0]))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            check_covariance(np.eye(2))


class TestRigidFit:
    def test_recovers_known_transform(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            truth = random_pose(rng)
            src = rng.uniform(-5, 5, (10, 2))
            dst = transform_points(truth, src)
            assert_pose_close(fit_rigid(src, dst), truth, tol=1e-9)

    def test_least_squares_under_noise(self):
        rng = np.random.default_rng(10)
        truth = Pose2(1.0, -2.0, 0.4)
        src = rng.uniform(-5, 5, (200, 2))
        dst = transform_points(truth, src) + rng.normal(0, 0.01, (200, 2))
        got = fit_rigid(src, dst)
        assert math.hypot(got.x - truth.x, got.y - truth.y) < 0.01
        assert abs(wrap_angle(got.theta - truth.theta)) < 0.01

    def test_rejects_short_input(self):
        with pytest.raises(ValueError):
            fit_rigid(np.zeros((1, 2)), np.zeros((1, 2)))

    def test_rejects_coincident_sources(self):
        src = np.zeros((5, 2))
        dst = np.arange(10.0).reshape(5, 2)
        with pytest.raises(ValueError):
            fit_rigid(src, dst)

    def test_similarity_recovers_scale(self):
        rng = np.random.default_rng(11)
        truth = Pose2(0.5, 1.5, -0.7)
        src = rng.uniform(-5, 5, (30, 2))
        dst = 2.5 * transform_points(truth, src)
        pose, scale = fit_similarity(src, dst)
        assert scale == pytest.approx(2.5, rel=1e-9)
        assert abs(wrap_angle(pose.theta - truth.theta)) < 1e-9

    def test_rigid_fit_ignores_scale(self):
        rng = np.random.default_rng(12)
        src = rng.uniform(-5, 5, (30, 2))
        dst = 3.0 * src
        pose = fit_rigid(src, dst)
        assert pose.theta == pytest.approx(0.0, abs=1e-9)
