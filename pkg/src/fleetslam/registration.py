"""Scan-to-map registration for inter-robot loop closures.

A received neighbor scan is registered against a sliding window of the
local point cloud map centered on the nearest local keyframe: the wider
the window, the more local structure the scan can latch onto. The ICP
result is accepted as a loop closure only when it converged and the
aligned scan is sufficiently covered by the local window cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fleetslam import backend
from fleetslam.consistency import LoopClosure
from fleetslam.geometry import (Pose2, between, compose, fit_rigid,
                                pose_norm, transform_points)
from fleetslam.objectmap import PointCloudMap


@dataclass
class IcpParams:
    """Iterative closest point knobs.

    Attributes:
        max_iter: iteration cap.
        corr_dist: correspondence distance cap, meters. Sized to the
            initial-guess error so ICP can still capture a sloppy init.
        overlap_dist: distance used for the reported overlap ratio,
            meters. Much tighter than corr_dist; a misregistration that
            still finds correspondences should not also score a high
            overlap. None falls back to corr_dist.
        tol: stop when the incremental update's pose norm drops below
            this.
    """

    max_iter: int = 50
    corr_dist: float = 2.0
    overlap_dist: float | None = 0.5
    tol: float = 1e-6


@dataclass
class RegistrationParams:
    """Candidate registration policy.

    Attributes:
        window: sliding window half-width in keyframes; the window over
            center c spans keyframes [c - window, c + window] clipped to
            the available history.
        epsilon_overlap: accept a closure only when the overlap ratio
            strictly exceeds this.
        icp: inner ICP configuration.
        sigma_xy: reported closure translation standard deviation.
            Scan-to-window registration is limited by boundary sampling
            mismatch, not sensor noise, so this is several times the
            per-point noise.
        sigma_theta: reported closure heading standard deviation.
        max_init_drift: reject results whose pose-norm distance from
            the initial guess exceeds this, meters (1 rad counts as
            1 m). The guess encodes the matched-object geometry; large
            drift means ICP slid onto the wrong structure.
        min_points: fewest covered scan points worth registering. A
            directional sonar shares only part of its footprint with
            another pass, so points the window does not cover at all
            are dropped before ICP; the overlap gate then scores
            alignment quality instead of footprint coverage. Scans
            with fewer covered points than this are not attempted.
    """

    window: int = 3
    epsilon_overlap: float = 0.9
    icp: IcpParams = field(default_factory=IcpParams)
    sigma_xy: float = 0.3
    sigma_theta: float = 0.03
    max_init_drift: float = 2.0
    min_points: int = 12


@dataclass
class RegistrationResult:
    """Outcome of one ICP run.

    Attributes:
        transform: total source-to-target transform, the initial guess
            composed with every accepted increment.
        overlap_ratio: fraction of final aligned source points with a
            target point within corr_dist, in [0, 1].
        rms_error: matched-pair RMS distance of the final iteration,
            inf when no iteration had correspondences.
        iterations: iterations executed.
        converged: update norm fell below tol before the cap.
        rms_history: per-iteration matched RMS, for diagnostics.
        source_points: points in the registered source cloud; when the
            caller pre-filtered the scan to covered structure, this is
            what survived.
    """

    transform: Pose2
    overlap_ratio: float
    rms_error: float
    iterations: int
    converged: bool
    rms_history: list[float] = field(default_factory=list)
    source_points: int = 0


def assemble_window(pc_map: PointCloudMap, center_kf: int,
                    window: int) -> np.ndarray:
    """Gathers map-frame points of keyframes around a center keyframe.

    Args:
        pc_map: source map.
        center_kf: keyframe index the window is centered on; must exist
            in the map.
        window: half-width; keyframes with |kf - center_kf| <= window
            contribute, clipped to the available history.

    Returns:
        (m, 2) stacked points in the map frame.

    Raises:
        ValueError: center keyframe not present.
    """
    if center_kf not in pc_map.keyframes():
        raise ValueError(f"keyframe {center_kf} not in map")
    clouds = [transform_points(pose, pts)
              for kf, pose, pts in pc_map.frames
              if abs(kf - center_kf) <= window and len(pts)]
    if not clouds:
        return np.zeros((0, 2))
    return np.concatenate(clouds, axis=0)


def compute_overlap(source_aligned, target, dist: float) -> float:
    """Fraction of target points with an aligned source point nearby.

    Args:
        source_aligned: (n, 2) source cloud already in the target frame.
        target: (m, 2) target cloud, nonempty.
        dist: inclusive coverage distance.

    Returns:
        Covered fraction of the target, in [0, 1].

    Raises:
        ValueError: empty target.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if target.shape[0] == 0:
        raise ValueError("target cloud is empty")
    source_aligned = np.asarray(source_aligned,
                                dtype=np.float64).reshape(-1, 2)
    if source_aligned.shape[0] == 0:
        return 0.0
    idx, _ = backend.nn_within(target, source_aligned, dist)
    return float(np.count_nonzero(idx >= 0)) / float(target.shape[0])


def icp(source, target, init: Pose2,
        params: IcpParams | None = None) -> RegistrationResult:
    """Point-to-point ICP in the plane.

    Each iteration matches the transformed source to its nearest target
    points within corr_dist, solves the closed-form rigid fit on the
    matches, and composes the increment onto the running transform.
    The reported overlap is the fraction of the final aligned source
    covered by the target within corr_dist.

    Args:
        source: (n, 2) points to align, nonempty.
        target: (m, 2) reference points, nonempty.
        init: initial source-to-target transform.
        params: ICP knobs, defaults used when None.

    Returns:
        RegistrationResult; when no correspondences exist under the
        initial guess the result has converged False and overlap 0.

    Raises:
        ValueError: empty source or target.
    """
    params = params or IcpParams()
    src = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("icp needs nonempty source and target clouds")

    total = init
    rms = math.inf
    history: list[float] = []
    converged = False
    iterations = 0
    for _ in range(params.max_iter):
        cur = transform_points(total, src)
        idx, _ = backend.nn_within(cur, tgt, params.corr_dist)
        matched = idx >= 0
        if not np.any(matched):
            break
        if np.count_nonzero(matched) < 2:
            break
        iterations += 1
        delta = fit_rigid(cur[matched], tgt[idx[matched]])
        total = compose(delta, total)
        res = transform_points(delta, cur[matched]) - tgt[idx[matched]]
        rms = float(np.sqrt(np.mean(np.einsum("ij,ij->i", res, res))))
        history.append(rms)
        if pose_norm(delta) < params.tol:
            converged = True
            break
    overlap = compute_overlap(tgt, transform_points(total, src),
                              params.overlap_dist or params.corr_dist)
    return RegistrationResult(transform=total, overlap_ratio=overlap,
                              rms_error=rms, iterations=iterations,
                              converged=converged, rms_history=history,
                              source_points=int(src.shape[0]))


def register_scan(local_map: PointCloudMap, scan, scan_pose: Pose2,
                  init: Pose2, params: RegistrationParams | None = None,
                  ) -> tuple[int | None, Pose2 | None,
                             RegistrationResult | None]:
    """Registers one scan against the sliding-window local map.

    The scan, expressed in its source map frame through its keyframe
    pose, is ICP-registered against the local window centered on the
    keyframe nearest the initial guess. The relative measurement is
    produced only when ICP converged, the overlap ratio strictly
    exceeds epsilon_overlap, and the final transform stayed within
    max_init_drift of the initial guess; a result that contradicts
    the prior by several meters is an aliased registration no matter
    how well its points agree.

    Args:
        local_map: local point cloud map with current pose estimates.
        scan: (n, 2) scan points in the scan keyframe frame.
        scan_pose: scan keyframe pose in the source map frame.
        init: initial source-map-to-local-map transform; identity when
            the scan is the local robot's own.
        params: registration policy, defaults used when None.

    Returns:
        (center_kf, measurement, result): window center keyframe, the
        relative pose from that keyframe to the scan keyframe expressed
        in the local frame, and the raw RegistrationResult. The first
        two are None when a gate rejected the fit; all three are None
        when no attempt was possible.
    """
    params = params or RegistrationParams()
    scan = np.asarray(scan, dtype=np.float64).reshape(-1, 2)
    if scan.shape[0] == 0 or not local_map.frames:
        return None, None, None

    # window center: local keyframe whose estimated pose sits closest
    # to the scan keyframe under the initial guess
    guess_xy = compose(init, scan_pose).translation
    dists = [float(np.hypot(pose.x - guess_xy[0], pose.y - guess_xy[1]))
             for _, pose, _ in local_map.frames]
    center_kf = local_map.frames[int(np.argmin(dists))][0]
    target = assemble_window(local_map, center_kf, params.window)
    if target.shape[0] == 0:
        return None, None, None

    source = transform_points(scan_pose, scan)
    # drop scan points the window has no structure for; they could
    # never be covered, so they only dilute the overlap ratio
    idx, _ = backend.nn_within(transform_points(init, source), target,
                               params.icp.corr_dist)
    source = source[idx >= 0]
    if source.shape[0] < params.min_points:
        return None, None, None
    result = icp(source, target, init, params.icp)
    if not result.converged or not result.overlap_ratio > params.epsilon_overlap:
        return None, None, result
    if pose_norm(between(init, result.transform)) > params.max_init_drift:
        return None, None, result

    local_kf_pose = next(pose for kf, pose, _ in local_map.frames
                         if kf == center_kf)
    measurement = between(local_kf_pose,
                          compose(result.transform, scan_pose))
    return center_kf, measurement, result


def register_candidate(local_map: PointCloudMap, neighbor_robot: int,
                       neighbor_kf: int, neighbor_scan,
                       neighbor_kf_pose: Pose2, init: Pose2,
                       params: RegistrationParams | None = None,
                       stamp: int = 0,
                       ) -> tuple[LoopClosure | None, RegistrationResult | None]:
    """Attempts an inter-robot loop closure from a received scan.

    Thin wrapper over register_scan that packages an accepted
    measurement as a LoopClosure between the window-center local
    keyframe and the sender's keyframe.

    Args:
        local_map: local point cloud map with current pose estimates.
        neighbor_robot: sender id.
        neighbor_kf: sender keyframe index of the scan.
        neighbor_scan: (n, 2) scan points in the keyframe frame.
        neighbor_kf_pose: sender's estimate of that keyframe pose in
            its own map frame.
        init: initial neighbor-map-to-local-map transform, typically
            from object graph matching.
        params: registration policy, defaults used when None.
        stamp: timestep recorded on the closure.

    Returns:
        (closure, result): the accepted LoopClosure or None, plus the
        raw RegistrationResult (None when no attempt was possible).
    """
    params = params or RegistrationParams()
    center_kf, measurement, result = register_scan(
        local_map, neighbor_scan, neighbor_kf_pose, init, params)
    if measurement is None:
        return None, result
    cov = np.diag([params.sigma_xy ** 2, params.sigma_xy ** 2,
                   params.sigma_theta ** 2])
    closure = LoopClosure(local_robot=local_map.robot_id,
                          local_kf=center_kf,
                          neighbor_robot=neighbor_robot,
                          neighbor_kf=neighbor_kf,
                          measurement=measurement, covariance=cov,
                          overlap=result.overlap_ratio, stamp=stamp)
    return closure, result
