"""Tests for windowed ICP registration and the overlap gate."""

from __future__ import annotations

import math

import numpy as np
import pytest

from fleetslam.geometry import (Pose2, between, compose, inverse,
                                transform_points)
from fleetslam.objectmap import PointCloudMap
from fleetslam.registration import (IcpParams, RegistrationParams,
                                    assemble_window, compute_overlap, icp,
                                    register_candidate)

from oracles import overlap_brute


def blob(rng: np.random.Generator, n: int = 60, span: float = 5.0):
    return rng.uniform(0.0, span, size=(n, 2))


def strip_map(n_frames: int = 7, spacing: float = 2.0) -> PointCloudMap:
    """Keyframes along x, each holding a 5-point vertical strip."""
    pc = PointCloudMap(robot_id=0)
    pts = np.array([[0.0, y] for y in (-1.0, -0.5, 0.0, 0.5, 1.0)])
    for k in range(n_frames):
        pc.add_frame(k, Pose2(spacing * k, 0.0, 0.0), pts)
    return pc


class TestAssembleWindow:
    def test_window_zero_is_center_frame_only(self):
        pc = strip_map()
        got = assemble_window(pc, 3, 0)
        expect = transform_points(Pose2(6.0, 0.0, 0.0), pc.frames[3][2])
        assert got.shape == (5, 2)
        np.testing.assert_allclose(got, expect)

    def test_window_one_spans_three_frames(self):
        pc = strip_map()
        got = assemble_window(pc, 3, 1)
        assert got.shape == (15, 2)
        xs = np.unique(np.round(got[:, 0], 9))
        np.testing.assert_allclose(xs, [4.0, 6.0, 8.0])

    def test_boundary_clamp(self):
        # Window 3 centered at keyframe 1 of a 10-frame map reaches
        # only frames 0..4: five frames.
        pc = strip_map(n_frames=10)
        got = assemble_window(pc, 1, 3)
        assert got.shape == (25, 2)
        xs = np.unique(np.round(got[:, 0], 9))
        np.testing.assert_allclose(xs, [0.0, 2.0, 4.0, 6.0, 8.0])

    def test_points_carry_keyframe_pose(self):
        pc = PointCloudMap(robot_id=0)
        pc.add_frame(0, Pose2(1.0, 2.0, math.pi / 2), np.array([[1.0, 0.0]]))
        got = assemble_window(pc, 0, 0)
        np.testing.assert_allclose(got, [[1.0, 3.0]], atol=1e-12)

    def test_missing_center_raises(self):
        pc = strip_map()
        with pytest.raises(ValueError):
            assemble_window(pc, 99, 1)

    def test_empty_frames_skipped(self):
        pc = PointCloudMap(robot_id=0)
        pc.add_frame(0, Pose2(), np.zeros((0, 2)))
        pc.add_frame(1, Pose2(1, 0, 0), np.array([[0.0, 0.0]]))
        got = assemble_window(pc, 0, 1)
        np.testing.assert_allclose(got, [[1.0, 0.0]])
        assert assemble_window(pc, 0, 0).shape == (0, 2)


class TestComputeOverlap:
    def test_identical_clouds(self):
        rng = np.random.default_rng(3)
        pts = blob(rng)
        assert compute_overlap(pts, pts, 0.5) == 1.0

    def test_half_displaced_beyond_dist(self):
        target = np.array([[float(i), 0.0] for i in range(10)])
        source = target.copy()
        source[5:, 1] += 50.0
        assert compute_overlap(source, target, 1e-6) == 0.5

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            src = blob(rng, n=40)
            tgt = blob(rng, n=55)
            dist = float(rng.uniform(0.2, 1.5))
            assert compute_overlap(src, tgt, dist) == pytest.approx(
                overlap_brute(src, tgt, dist))

    def test_inclusive_at_exact_distance(self):
        src = np.array([[0.0, 0.0]])
        tgt = np.array([[3.0, 4.0]])
        assert compute_overlap(src, tgt, 5.0) == 1.0

    def test_empty_target_raises_empty_source_is_zero(self):
        pts = np.array([[0.0, 0.0]])
        with pytest.raises(ValueError):
            compute_overlap(pts, np.zeros((0, 2)), 1.0)
        assert compute_overlap(np.zeros((0, 2)), pts, 1.0) == 0.0


class TestIcp:
    def test_self_registration_fixed_point(self):
        rng = np.random.default_rng(7)
        pts = blob(rng)
        res = icp(pts, pts, Pose2())
        assert res.converged
        assert res.overlap_ratio == 1.0
        assert abs(res.transform.x) < 1e-9
        assert abs(res.transform.y) < 1e-9
        assert abs(res.transform.theta) < 1e-9
        assert res.rms_error < 1e-9

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(9)
        src = blob(rng, n=80, span=4.0)
        true = Pose2(0.3, -0.2, math.radians(5.0))
        tgt = transform_points(true, src)
        res = icp(src, tgt, Pose2())
        assert res.converged
        err = between(true, res.transform)
        assert math.hypot(err.x, err.y) < 0.01
        assert abs(err.theta) < math.radians(0.1)
        assert res.overlap_ratio == 1.0

    def test_disjoint_clouds_fail_without_iterating(self):
        rng = np.random.default_rng(11)
        src = blob(rng)
        tgt = blob(rng) + 100.0
        res = icp(src, tgt, Pose2(), IcpParams(corr_dist=2.0))
        assert not res.converged
        assert res.overlap_ratio == 0.0
        assert res.iterations == 0
        assert math.isinf(res.rms_error)
        assert res.rms_history == []

    def test_result_composes_onto_init(self):
        rng = np.random.default_rng(13)
        src = blob(rng, n=70)
        true = Pose2(1.5, -0.8, 0.4)
        tgt = transform_points(true, src)
        res = icp(src, tgt, true)
        err = between(true, res.transform)
        assert math.hypot(err.x, err.y) < 1e-9
        assert abs(err.theta) < 1e-9

    def test_rms_non_increasing_with_stable_correspondences(self):
        # A cap wider than the scene keeps every source point matched,
        # for which alternating fit and re-matching provably never
        # raises the matched rms.
        rng = np.random.default_rng(17)
        for seed in range(5):
            src = blob(np.random.default_rng(seed), n=60)
            true = Pose2(0.4, -0.3, 0.12)
            tgt = transform_points(true, src)
            res = icp(src, tgt, Pose2(), IcpParams(corr_dist=1e6))
            assert res.converged
            diffs = np.diff(res.rms_history)
            assert np.all(diffs <= 1e-9)

    def test_empty_inputs_raise(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            icp(np.zeros((0, 2)), pts, Pose2())
        with pytest.raises(ValueError):
            icp(pts, np.zeros((0, 2)), Pose2())

    def test_rigid_equivariance(self):
        # Moving both clouds by the same rigid map conjugates the
        # recovered transform by that map.
        rng = np.random.default_rng(19)
        src = blob(rng, n=60)
        true = Pose2(0.5, 0.2, 0.15)
        tgt = transform_points(true, src)
        init = Pose2(0.1, 0.0, 0.05)
        base = icp(src, tgt, init)

        conj = Pose2(3.0, -1.0, 0.7)
        src2 = transform_points(conj, src)
        tgt2 = transform_points(conj, tgt)
        init2 = compose(compose(conj, init), inverse(conj))
        moved = icp(src2, tgt2, init2)

        expect = compose(compose(conj, base.transform), inverse(conj))
        err = between(expect, moved.transform)
        assert math.hypot(err.x, err.y) < 1e-6
        assert abs(err.theta) < 1e-6
        assert moved.overlap_ratio == pytest.approx(base.overlap_ratio)


def neighbor_scan_setup():
    """A 5-keyframe local map, and a neighbor scan of its middle region.

    Returns the local map, the neighbor keyframe pose (neighbor map
    frame), the scan points (keyframe frame), and the true
    neighbor-map-to-local-map transform.
    """
    pc = PointCloudMap(robot_id=0)
    rng = np.random.default_rng(23)
    for k in range(5):
        pts = rng.uniform(-1.0, 1.0, size=(20, 2))
        pc.add_frame(k, Pose2(2.0 * k, 0.0, 0.0), pts)
    true_tf = Pose2(10.0, 6.0, -0.5)
    world_kf = Pose2(4.2, 0.1, 0.2)
    nbr_kf_pose = compose(inverse(true_tf), world_kf)
    region = np.concatenate(
        [transform_points(pose, pts) for kf, pose, pts in pc.frames
         if 1 <= kf <= 3])
    scan = transform_points(inverse(world_kf), region)
    return pc, nbr_kf_pose, scan, true_tf, world_kf


class TestRegisterCandidate:
    def test_accepts_and_reports_relative_pose(self):
        pc, nbr_pose, scan, true_tf, world_kf = neighbor_scan_setup()
        params = RegistrationParams(window=1, epsilon_overlap=0.9,
                                    sigma_xy=0.1, sigma_theta=0.02)
        init = compose(Pose2(0.3, -0.2, 0.06), true_tf)
        closure, result = register_candidate(
            pc, 1, 7, scan, nbr_pose, init, params, stamp=42)
        assert result is not None and result.converged
        assert closure is not None
        assert closure.local_robot == 0
        assert closure.neighbor_robot == 1
        assert closure.neighbor_kf == 7
        assert closure.local_kf == 2
        assert closure.stamp == 42
        assert closure.overlap == result.overlap_ratio > 0.9
        expect = between(Pose2(4.0, 0.0, 0.0), world_kf)
        err = between(expect, closure.measurement)
        assert math.hypot(err.x, err.y) < 1e-3
        assert abs(err.theta) < 1e-3
        np.testing.assert_allclose(np.diag(closure.covariance),
                                   [0.01, 0.01, 0.0004])

    def test_center_keyframe_tracks_initial_guess(self):
        pc, nbr_pose, scan, true_tf, world_kf = neighbor_scan_setup()
        params = RegistrationParams(window=3, epsilon_overlap=0.0)
        closure, _ = register_candidate(pc, 1, 0, scan, nbr_pose,
                                        true_tf, params)
        assert closure is not None and closure.local_kf == 2

    def test_gate_is_strict(self):
        # 90 of 100 source points lie exactly on a coarse grid of
        # target points; the other ten sit 0.6 m from isolated anchor
        # points in balanced pairs, inside the correspondence cap but
        # outside the coverage distance. ICP converges at the identity
        # and the overlap is exactly 0.90.
        gx, gy = np.meshgrid(3.0 * np.arange(10), 3.0 * np.arange(9))
        covered = np.stack([gx.ravel(), gy.ravel()], axis=1)
        anchors = np.array([[1.5 + 3.0 * i, 1.5] for i in range(5)])
        offset = np.array([0.0, 0.6])
        source = np.concatenate([covered, anchors + offset,
                                 anchors - offset])
        pc = PointCloudMap(robot_id=0)
        pc.add_frame(0, Pose2(), np.concatenate([covered, anchors]))
        nbr_pose = Pose2()
        for eps, accepted in ((0.90, False), (0.89, True)):
            params = RegistrationParams(window=0, epsilon_overlap=eps)
            closure, result = register_candidate(
                pc, 1, 0, source, nbr_pose, Pose2(), params)
            assert result is not None and result.converged
            assert result.overlap_ratio == 90 / 100
            assert (closure is not None) == accepted

    def test_gross_init_blocks_attempt(self):
        # An initial guess 20 m off leaves no scan point near window
        # structure, so there is nothing to register at all.
        pc, nbr_pose, scan, true_tf, _ = neighbor_scan_setup()
        params = RegistrationParams(window=3, epsilon_overlap=0.5)
        bad_init = compose(Pose2(20.0, 20.0, 0.0), true_tf)
        closure, result = register_candidate(pc, 1, 0, scan, nbr_pose,
                                             bad_init, params)
        assert closure is None
        assert result is None

    def test_sliding_fit_far_from_init_is_rejected(self):
        # Two long parallel rows of points let ICP slide the scan
        # meters along the structure onto a perfect but wrong fit; the
        # overlap is total, yet the transform contradicts the initial
        # guess and the drift cap drops it.
        xs = np.arange(10.0, 40.0, 0.25)
        wall = np.concatenate([
            np.stack([xs, np.zeros_like(xs)], axis=1),
            np.stack([xs, np.full_like(xs, 0.5)], axis=1)])
        pc = PointCloudMap(robot_id=0)
        pc.add_frame(0, Pose2(), wall)
        sx = np.arange(0.0, 10.0, 0.25)
        scan = np.concatenate([
            np.stack([sx, np.zeros_like(sx)], axis=1),
            np.stack([sx, np.full_like(sx, 0.5)], axis=1)])
        params = RegistrationParams(
            window=0, epsilon_overlap=0.5, max_init_drift=2.0,
            icp=IcpParams(corr_dist=6.0))
        init = Pose2(2.0, 0.0, 0.0)
        closure, result = register_candidate(pc, 1, 0, scan, Pose2(),
                                             init, params)
        assert result is not None and result.converged
        assert result.overlap_ratio > 0.9
        drift = between(init, result.transform)
        assert math.hypot(drift.x, drift.y) > 2.0
        assert closure is None

    def test_empty_scan_or_map_skips(self):
        pc, nbr_pose, scan, true_tf, _ = neighbor_scan_setup()
        assert register_candidate(pc, 1, 0, np.zeros((0, 2)), nbr_pose,
                                  true_tf) == (None, None)
        empty = PointCloudMap(robot_id=0)
        assert register_candidate(empty, 1, 0, scan, nbr_pose,
                                  true_tf) == (None, None)

    def test_wider_window_registers_more_structure(self):
        # The neighbor scan spans five strips. The window-0 target is a
        # single strip covering too little of the scan to attempt a
        # registration; wider windows admit more covered strips through
        # the pre-filter until the whole scan registers and passes.
        pc = strip_map(n_frames=7)
        world = np.concatenate(
            [transform_points(pose, pts) for kf, pose, pts in pc.frames
             if 1 <= kf <= 5])
        world_kf = Pose2(6.0, 0.0, 0.0)
        scan = transform_points(inverse(world_kf), world)
        nbr_pose = Pose2()
        true_tf = world_kf
        counts = {}
        accepted = {}
        for window in (0, 1, 2, 3):
            params = RegistrationParams(
                window=window, epsilon_overlap=0.9,
                icp=IcpParams(corr_dist=0.9))
            closure, result = register_candidate(
                pc, 1, 0, scan, nbr_pose, true_tf, params)
            counts[window] = result.source_points if result else 0
            accepted[window] = closure is not None
        assert counts == {0: 0, 1: 15, 2: 25, 3: 25}
        assert not accepted[0] and accepted[1] and accepted[3]
