"""Per-robot SLAM node: local mapping plus the inter-robot protocol.

Each node consumes its own odometry and sonar scans, maintains a local
pose graph and point cloud map, and talks to the fleet through five
message kinds: object map broadcasts, incremental pose updates, scan
requests, scan responses, and accepted-closure broadcasts.

The inter-robot loop closure pipeline per tick:

    neighbor object map -> graph match -> map transform + scan requests
    neighbor scan       -> windowed ICP -> candidate closure
    candidate           -> consistency graph -> max clique -> accepted
    accepted            -> two-step (or full) pose graph optimization

Nodes never see ground truth; the simulation layer may install an
injection hook that corrupts registration output before the node sees
it, which is how outlier experiments are driven.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from fleetslam import backend, comms
from fleetslam.comms import Envelope
from fleetslam.consistency import (ConsistencyGraph, ConsistencyParams,
                                   LoopClosure, make_scorer)
from fleetslam.geometry import (Pose2, between, compose, inverse, pose_norm,
                                transform_points, wrap_angle)
from fleetslam.graphmatch import (MatchParams, Matching, build_graph,
                                  estimate_transform, match_graphs)
from fleetslam.objectmap import (ObjectMap, ObjectMapParams, PointCloudMap,
                                 build_object_map)
from fleetslam.pgo import (FactorGraph, PgoParams, full_pgo,
                           two_step_optimize)
from fleetslam.registration import (RegistrationParams, register_candidate,
                                    register_scan)


@dataclass
class NodeParams:
    """Everything configurable about one node's pipeline.

    Attributes:
        object_map: clustering thresholds.
        match: graph matching and transform RANSAC knobs.
        registration: window, overlap gate, ICP knobs.
        consistency: mode ("gcm"/"pcm") and thresholds.
        pgo: solver configuration; its relay_cov is overridden per run,
            derived from the odometry sigmas and relay_slack.
        pgo_mode: "two_step" or "full".
        odom_sigma_xy: odometry translation noise the factors assume.
        odom_sigma_theta: odometry heading noise the factors assume.
        relay_slack: relayed neighbor chains get per-step sigmas of
            relay_slack times the odometry sigmas, covering relay gaps
            and wire quantization.
        seq_icp: add scan-matching factors between consecutive
            keyframes.
        seq_sigma_xy: sequential-ICP factor translation sigma. Kept far
            looser than odometry: consecutive sparse scans sample
            different physical boundary points, so their registration
            carries correspondence error well above the sensor noise.
        seq_sigma_theta: sequential-ICP factor heading sigma.
        intra_loops: register fresh scans against the robot's own
            older map; accepted fits become robust loop factors that
            pin revisited regions together without any communication.
        intra_period: keyframes between intra-loop attempts.
        intra_min_gap: fewest keyframes separating the scan from the
            map frames it may register against. Keeps intra loops out
            of sequential-ICP territory, where they would only restate
            the odometry.
        intra_epsilon_overlap: overlap gate for intra loops. Looser
            than the inter-robot gate because a forward-looking sonar
            sees mostly different objects on anti-parallel passes; the
            tight init-drift cap carries the aliasing protection, as
            objects sit several meters apart.
        intra_max_init_drift: init-drift cap for intra loops, meters.
            The init is the robot's own running estimate, whose error
            between two passes stays well under the spacing of objects,
            so any fit that moved further latched onto wrong structure.
        match_period: ticks between matching attempts per neighbor.
        max_registrations_per_tick: ICP budget per tick.
        optimize_interval: fewest ticks between optimizations.
        request_radius: neighbor keyframes within this distance of a
            matched object center are scan-request candidates.
        max_requests_per_match: request cap per matching round.
        re_request_period: ticks before a neighbor keyframe whose scan
            produced no accepted closure may be requested again. The
            local map keeps growing, so a fit that once failed the
            overlap gate can succeed later.
        budget_bits: per-tick transmit budget; the rest is deferred.
    """

    object_map: ObjectMapParams = field(default_factory=ObjectMapParams)
    match: MatchParams = field(default_factory=MatchParams)
    registration: RegistrationParams = field(
        default_factory=RegistrationParams)
    consistency: ConsistencyParams = field(default_factory=ConsistencyParams)
    pgo: PgoParams = field(default_factory=PgoParams)
    pgo_mode: str = "two_step"
    odom_sigma_xy: float = 0.02
    odom_sigma_theta: float = 0.0035
    relay_slack: float = 2.0
    seq_icp: bool = True
    seq_sigma_xy: float = 0.2
    seq_sigma_theta: float = 0.03
    intra_loops: bool = True
    intra_period: int = 1
    intra_min_gap: int = 15
    intra_epsilon_overlap: float = 0.6
    intra_max_init_drift: float = 1.5
    match_period: int = 3
    max_registrations_per_tick: int = 4
    optimize_interval: int = 4
    request_radius: float = 18.0
    max_requests_per_match: int = 6
    re_request_period: int = 25
    budget_bits: float = 62_500.0


@dataclass
class RegRecord:
    """One registration attempt, for evaluation and debugging."""

    stamp: int
    neighbor_robot: int
    neighbor_kf: int
    local_kf: int
    converged: bool
    overlap: float
    rms: float
    gate_passed: bool
    injected: bool = False
    closure: LoopClosure | None = None


class RobotNode:
    """One robot's SLAM state machine.

    Drive it by calling tick() once per timestep with the inbox and the
    new keyframe data; it returns the outbox. All cross-robot knowledge
    flows through messages.
    """

    def __init__(self, robot_id: int, params: NodeParams | None = None,
                 rng: np.random.Generator | None = None):
        self.robot_id = robot_id
        self.params = params or NodeParams()
        self.rng = rng or np.random.default_rng(robot_id)

        self.kf_count = 0
        self.graph = FactorGraph()
        self.estimates: dict[int, Pose2] = {}
        self.pc_map = PointCloudMap(robot_id=robot_id)
        self.object_map = ObjectMap(robot_id=robot_id)

        self.relayed_poses: dict[int, dict[int, Pose2]] = {}
        self.neighbor_maps: dict[int, ObjectMap] = {}
        self.neighbor_scans: dict[tuple[int, int], np.ndarray] = {}
        self.match_tf: dict[int, Pose2] = {}
        self.placements: dict[int, Pose2] = {}
        self._own_placement: set[int] = set()
        self.relayed_closures: list[LoopClosure] = []

        self.queue: list[LoopClosure] = []
        self.accepted: list[int] = []
        self._gcm_graph = ConsistencyGraph(params=self.params.consistency)
        self._pcm_graphs: dict[int, ConsistencyGraph] = {}
        self._pcm_index: dict[int, list[int]] = {}

        self.fleet_estimates: dict[tuple[int, int], Pose2] = {}
        self.reg_log: list[RegRecord] = []
        self.stage_times: dict[str, list[float]] = {
            "object_map": [], "match": [], "icp": [], "optimize": []}
        self.malformed = 0
        self.injection_hook: Callable[[LoopClosure], LoopClosure] | None = None

        self._seq: dict[str, int] = {}
        self._seen: set[tuple[int, str, int]] = set()
        self._requested: dict[tuple[int, int], int] = {}
        self._registered: set[tuple[int, int]] = set()
        self._pending_reg: deque[tuple[int, int, int]] = deque()
        self._last_match: dict[int, int] = {}
        self._last_map_payload: bytes | None = None
        self._pose_sent_upto = 0
        self._pose_refresh = False
        self._broadcast_closures: set[tuple[int, int, int, int]] = set()
        self._has_intra = False
        self._pending_opt = False
        self._last_opt = -10**9
        self._deferred: deque[tuple[int, str, bytes]] = deque()

    # ------------------------------------------------------------------
    # keyframe ingestion

    def add_keyframe(self, odom_motion: Pose2 | None, scan,
                     stamp: int) -> None:
        """Appends a keyframe from odometry and a sonar scan.

        The first keyframe anchors the local frame at the identity.
        Later keyframes add an odometry factor and, when enough points
        match, a sequential scan-matching factor; the running estimate
        is the information-weighted composition of the two motions.
        """
        scan = np.asarray(scan, dtype=np.float64).reshape(-1, 2)
        kf = self.kf_count
        p = self.params
        if kf == 0:
            self.graph.add_prior((self.robot_id, 0), Pose2(),
                                 p.pgo.prior_cov)
            self.estimates[0] = Pose2()
        else:
            odom_cov = np.diag([p.odom_sigma_xy ** 2, p.odom_sigma_xy ** 2,
                                p.odom_sigma_theta ** 2])
            prev_est = self.estimates[kf - 1]
            self.graph.ensure_variable((self.robot_id, kf),
                                       compose(prev_est, odom_motion))
            self.graph.add_between((self.robot_id, kf - 1),
                                   (self.robot_id, kf), odom_motion,
                                   odom_cov)
            motion = odom_motion
            seq = self._seq_icp_motion(kf, scan, odom_motion)
            if seq is not None:
                seq_cov = np.diag([p.seq_sigma_xy ** 2, p.seq_sigma_xy ** 2,
                                   p.seq_sigma_theta ** 2])
                self.graph.add_between((self.robot_id, kf - 1),
                                       (self.robot_id, kf), seq, seq_cov)
                motion = _fuse_motions(odom_motion, odom_cov, seq, seq_cov)
            self.estimates[kf] = compose(prev_est, motion)
            self.graph.variables[(self.robot_id, kf)] = self.estimates[kf]
        self.pc_map.add_frame(kf, self.estimates[kf], scan)
        self.kf_count += 1

        t0 = time.perf_counter()
        self.object_map = build_object_map(self.pc_map, p.object_map,
                                           stamp=stamp)
        self.stage_times["object_map"].append(time.perf_counter() - t0)

    def _seq_icp_motion(self, kf: int, scan: np.ndarray,
                        odom: Pose2) -> Pose2 | None:
        """Scan-matches consecutive keyframes; None when unreliable."""
        if not self.params.seq_icp or kf == 0:
            return None
        prev_scan = self.pc_map.frames[-1][2]
        if len(prev_scan) < 8 or len(scan) < 8:
            return None
        from fleetslam.registration import icp
        result = icp(scan, prev_scan, odom, self.params.registration.icp)
        if not result.converged or result.overlap_ratio < 0.5:
            return None
        # reject fits that wander far from odometry
        if pose_norm(between(odom, result.transform)) > 0.5:
            return None
        return result.transform

    def _run_intra_loop(self, now: int) -> None:
        """Registers the newest scan against the robot's own older map.

        When the trajectory re-enters previously mapped territory, the
        fresh scan is ICP-registered against the window of frames at
        least intra_min_gap keyframes old; an accepted fit becomes a
        robust loop factor between the two local keyframes, so drift
        accumulated between the passes is squeezed out at the next
        optimization.
        """
        p = self.params
        kf = self.kf_count - 1
        if not p.intra_loops or kf < p.intra_min_gap:
            return
        if kf % p.intra_period != 0:
            return
        pose = self.estimates[kf]
        old_frames = [f for f in self.pc_map.frames
                      if f[0] <= kf - p.intra_min_gap
                      and np.hypot(f[1].x - pose.x, f[1].y - pose.y) < 40.0]
        if not old_frames:
            return
        old_map = PointCloudMap(robot_id=self.robot_id, frames=old_frames)
        scan = self.pc_map.frames[-1][2]
        if len(scan) < 8:
            return
        # the registration target is every retained old frame, not a
        # keyframe window: a revisit overlaps whatever passes came near,
        # however far apart their keyframe indices are
        reg = replace(p.registration, window=len(self.pc_map.frames),
                      epsilon_overlap=p.intra_epsilon_overlap,
                      max_init_drift=p.intra_max_init_drift)
        t0 = time.perf_counter()
        center_kf, measurement, result = register_scan(
            old_map, scan, pose, Pose2(), reg)
        self.stage_times["icp"].append(time.perf_counter() - t0)
        if result is None:
            return
        self.reg_log.append(RegRecord(
            stamp=now, neighbor_robot=self.robot_id, neighbor_kf=kf,
            local_kf=center_kf if center_kf is not None else -1,
            converged=result.converged, overlap=result.overlap_ratio,
            rms=result.rms_error, gate_passed=measurement is not None))
        if measurement is None:
            return
        cov = np.diag([p.registration.sigma_xy ** 2,
                       p.registration.sigma_xy ** 2,
                       p.registration.sigma_theta ** 2])
        self.graph.add_between((self.robot_id, center_kf),
                               (self.robot_id, kf), measurement, cov,
                               robust=True)
        self._has_intra = True
        self._pending_opt = True

    # ------------------------------------------------------------------
    # protocol tick

    def tick(self, now: int, inbox: list[Envelope],
             keyframe: tuple[Pose2 | None, np.ndarray] | None) -> list[Envelope]:
        """Runs one protocol step.

        Args:
            now: current timestep.
            inbox: messages delivered this step.
            keyframe: (odometry motion, scan) for a new keyframe, or
                None when the robot adds no keyframe this step.

        Returns:
            Outbox envelopes, already trimmed to the transmit budget.
        """
        if keyframe is not None:
            self.add_keyframe(keyframe[0], keyframe[1], now)
            self._run_intra_loop(now)

        requests_in: list[tuple[int, list[int]]] = []
        for env in inbox:
            self._ingest(env, now, requests_in)
        self._bootstrap_placements()

        new_requests = self._run_matching(now)
        self._run_registrations(now)

        if self._pending_opt and now - self._last_opt >= \
                self.params.optimize_interval:
            self.optimize(now)

        return self._assemble_outbox(now, requests_in, new_requests)

    def _ingest(self, env: Envelope, now: int,
                requests_in: list[tuple[int, list[int]]]) -> None:
        key = (env.src, env.kind, env.seq)
        if key in self._seen:
            return
        self._seen.add(key)
        try:
            if env.kind == comms.KIND_POSE_UPDATE:
                src, poses = comms.decode_pose_update(env.payload)
                store = self.relayed_poses.setdefault(src, {})
                store.update(poses)
            elif env.kind == comms.KIND_OBJECT_MAP:
                omap = comms.decode_object_map(env.payload, stamp=now)
                self.neighbor_maps[omap.robot_id] = omap
            elif env.kind == comms.KIND_SCAN_REQUEST:
                src, kfs = comms.decode_scan_request(env.payload)
                requests_in.append((src, kfs))
            elif env.kind == comms.KIND_SCAN:
                src, kf, pts = comms.decode_scan(env.payload)
                if (src, kf) not in self._registered:
                    self.neighbor_scans[(src, kf)] = pts
                    self._pending_reg.append((src, kf, 0))
            elif env.kind == comms.KIND_LOOP_CLOSURES:
                for z in comms.decode_loop_closures(env.payload, stamp=now):
                    # closures are broadcast by their local robot, so
                    # anything claiming to be ours is a malformed echo
                    if z.local_robot != self.robot_id:
                        self.relayed_closures.append(z)
        except (comms.WireError, ValueError):
            self.malformed += 1

    def _bootstrap_placements(self) -> None:
        """Derives missing neighbor placements from relayed closures.

        A closure between robots a and b, together with their relayed
        trajectories and a known placement of either one, places the
        other in the local frame; a closure one of whose endpoints is
        this robot places its sender directly. Bootstrapped placements
        are rebuilt every tick so they track the freshest estimates;
        placements from this robot's own optimization are left alone.
        """
        def pose_of(robot: int, kf: int) -> Pose2 | None:
            if robot == self.robot_id:
                return self.estimates.get(kf)
            return self.relayed_poses.get(robot, {}).get(kf)

        self.placements = {r: p for r, p in self.placements.items()
                           if r in self._own_placement}
        for _ in range(3):
            changed = False
            for z in self.relayed_closures:
                pa = pose_of(z.local_robot, z.local_kf)
                pb = pose_of(z.neighbor_robot, z.neighbor_kf)
                if pa is None or pb is None:
                    continue
                # map of z.neighbor_robot expressed in z.local_robot's map
                a_to_b = compose(compose(pa, z.measurement), inverse(pb))
                have_a = z.local_robot in self.placements \
                    or z.local_robot == self.robot_id
                have_b = z.neighbor_robot in self.placements \
                    or z.neighbor_robot == self.robot_id
                place_of = lambda r: (Pose2() if r == self.robot_id
                                      else self.placements[r])
                if have_a and not have_b:
                    self.placements[z.neighbor_robot] = compose(
                        place_of(z.local_robot), a_to_b)
                    changed = True
                elif have_b and not have_a and z.local_robot != self.robot_id:
                    self.placements[z.local_robot] = compose(
                        place_of(z.neighbor_robot), inverse(a_to_b))
                    changed = True
            if not changed:
                break

    def _run_matching(self, now: int) -> list[tuple[int, list[int]]]:
        """Matches fresh neighbor maps, returns scan requests to send."""
        p = self.params
        requests: list[tuple[int, list[int]]] = []
        if len(self.object_map) < 2:
            return requests
        local_graph = None
        for nbr in sorted(self.neighbor_maps):
            omap = self.neighbor_maps[nbr]
            if len(omap) < 2:
                continue
            if now - self._last_match.get(nbr, -10**9) < p.match_period:
                continue
            self._last_match[nbr] = now
            if local_graph is None:
                local_graph = build_graph(self.object_map)
            t0 = time.perf_counter()
            nbr_graph = build_graph(omap)
            try:
                matching = match_graphs(local_graph, nbr_graph, p.match)
                transform = estimate_transform(matching, local_graph,
                                               nbr_graph, p.match, self.rng)
            except ValueError:
                transform = None
            self.stage_times["match"].append(time.perf_counter() - t0)
            if transform is None:
                continue
            self.match_tf[nbr] = transform
            kfs = self._select_request_kfs(nbr, nbr_graph, matching, now)
            if kfs:
                requests.append((nbr, kfs))
        return requests

    def _select_request_kfs(self, nbr: int, nbr_graph,
                            matching: Matching, now: int) -> list[int]:
        """Neighbor keyframes worth requesting scans for.

        For every inlier object correspondence, the neighbor keyframe
        (from relayed poses) closest to the matched object's center is
        requested, capped per round. A keyframe whose scan has not yet
        produced an accepted closure becomes requestable again after
        re_request_period ticks; the local map keeps growing, so the
        same scan can register where it previously could not.
        """
        poses = self.relayed_poses.get(nbr)
        if not poses:
            return []
        kfs_sorted = sorted(poses)
        xy = np.array([[poses[k].x, poses[k].y] for k in kfs_sorted])
        chosen: list[int] = []
        for pair_idx in matching.inlier_pairs:
            _, obj_id = matching.pairs[pair_idx]
            center = nbr_graph.boxes[obj_id].center
            d = np.linalg.norm(xy - center, axis=1)
            order = np.argsort(d, kind="stable")
            for oi in order:
                if d[oi] > self.params.request_radius:
                    break
                kf = kfs_sorted[int(oi)]
                asked = self._requested.get((nbr, kf))
                fresh = asked is not None and \
                    now - asked < self.params.re_request_period
                if not fresh and (nbr, kf) not in self._registered:
                    self._requested[(nbr, kf)] = now
                    chosen.append(kf)
                    break
            if len(chosen) >= self.params.max_requests_per_match:
                break
        return chosen

    def _run_registrations(self, now: int) -> None:
        p = self.params
        budget = p.max_registrations_per_tick
        retry: list[tuple[int, int, int]] = []
        while budget > 0 and self._pending_reg:
            nbr, kf, tries = self._pending_reg.popleft()
            if (nbr, kf) in self._registered:
                continue
            # placements (own-optimized or bootstrapped from accepted
            # closures) beat the one-shot matching transform as init
            init = self.placements.get(nbr, self.match_tf.get(nbr))
            nbr_pose = self.relayed_poses.get(nbr, {}).get(kf)
            if init is None or nbr_pose is None:
                if tries < 3:
                    retry.append((nbr, kf, tries + 1))
                continue
            scan = self.neighbor_scans.pop((nbr, kf), None)
            if scan is None:
                continue
            budget -= 1
            t0 = time.perf_counter()
            closure, result = register_candidate(
                self.pc_map, nbr, kf, scan, nbr_pose, init,
                p.registration, stamp=now)
            self.stage_times["icp"].append(time.perf_counter() - t0)
            if result is None:
                continue
            rec = RegRecord(
                stamp=now, neighbor_robot=nbr, neighbor_kf=kf,
                local_kf=closure.local_kf if closure else -1,
                converged=result.converged, overlap=result.overlap_ratio,
                rms=result.rms_error, gate_passed=closure is not None)
            if closure is not None:
                # a keyframe with an accepted closure is never redone
                self._registered.add((nbr, kf))
                if self.injection_hook is not None:
                    before = closure
                    closure = self.injection_hook(closure)
                    rec.injected = closure is not before
                rec.closure = closure
                self._enqueue_closure(closure)
            self.reg_log.append(rec)
        self._pending_reg.extend(retry)

    def _enqueue_closure(self, closure: LoopClosure) -> None:
        p = self.params
        scorer = make_scorer(self.estimates, self.relayed_poses,
                             self.placements, p.consistency)
        if len(self.queue) >= p.consistency.max_nodes:
            drop = len(self.queue) - p.consistency.max_nodes + 1
            self.queue = self.queue[drop:]
            self._rebuild_graphs(scorer)
        self.queue.append(closure)
        qi = len(self.queue) - 1
        if p.consistency.mode == "pcm":
            g = self._pcm_graphs.setdefault(
                closure.neighbor_robot, ConsistencyGraph(params=p.consistency))
            self._pcm_index.setdefault(closure.neighbor_robot, []).append(qi)
            g.update(closure, scorer)
        else:
            self._gcm_graph.update(closure, scorer)
        self._recompute_accepted()
        self._pending_opt = True

    def _rebuild_graphs(self, scorer) -> None:
        p = self.params
        self._gcm_graph = ConsistencyGraph(params=p.consistency)
        self._pcm_graphs = {}
        self._pcm_index = {}
        for qi, z in enumerate(self.queue):
            if p.consistency.mode == "pcm":
                g = self._pcm_graphs.setdefault(
                    z.neighbor_robot, ConsistencyGraph(params=p.consistency))
                self._pcm_index.setdefault(z.neighbor_robot, []).append(qi)
                g.update(z, scorer)
            else:
                self._gcm_graph.update(z, scorer)

    def _recompute_accepted(self) -> None:
        if self.params.consistency.mode == "pcm":
            accepted: list[int] = []
            for nbr in sorted(self._pcm_graphs):
                idx = self._pcm_index[nbr]
                seed = [idx.index(i) for i in self.accepted if i in idx]
                clique = self._pcm_graphs[nbr].max_clique(seed=seed or None)
                accepted.extend(idx[j] for j in clique)
            self.accepted = sorted(accepted)
        else:
            seed = [i for i in self.accepted if i < len(self.queue)]
            self.accepted = self._gcm_graph.max_clique(seed=seed or None)

    # ------------------------------------------------------------------
    # optimization

    def _pgo_params(self) -> PgoParams:
        """Solver configuration with relay_cov tied to the odometry noise.

        Relayed chains are the neighbor's own odometry; trusting them
        tighter than that poisons the robust kernel into rejecting true
        closures, so the per-step covariance tracks the mission sigmas.
        """
        p = self.params
        s_xy = p.relay_slack * p.odom_sigma_xy
        s_th = p.relay_slack * p.odom_sigma_theta
        return replace(p.pgo,
                       relay_cov=np.diag([s_xy ** 2, s_xy ** 2, s_th ** 2]))

    def optimize(self, now: int) -> None:
        """Runs the configured pose graph optimization and refreshes
        estimates, placements, and the point cloud map poses."""
        self._pending_opt = False
        self._last_opt = now
        accepted = [self.queue[i] for i in self.accepted]
        if not accepted and not self._has_intra:
            return
        chains = {nbr: sorted(poses.items())
                  for nbr, poses in self.relayed_poses.items()}
        pgo_params = self._pgo_params()
        t0 = time.perf_counter()
        if self.params.pgo_mode == "full":
            estimates, _ = full_pgo(self.robot_id, self.graph, accepted,
                                    chains, self.placements, pgo_params,
                                    relayed=self.relayed_closures)
            placements = {}
            for nbr, poses in self.relayed_poses.items():
                for kf in sorted(poses):
                    if (nbr, kf) in estimates:
                        placements[nbr] = compose(estimates[(nbr, kf)],
                                                  inverse(poses[kf]))
                        break
        else:
            result = two_step_optimize(self.robot_id, self.graph, accepted,
                                       chains, self.placements, pgo_params,
                                       relayed=self.relayed_closures)
            estimates, placements = result.estimates, result.placements
        self.stage_times["optimize"].append(time.perf_counter() - t0)

        self.fleet_estimates = estimates
        own = {kf: pose for (rid, kf), pose in estimates.items()
               if rid == self.robot_id}
        self.estimates.update(own)
        for kf, pose in own.items():
            self.graph.variables[(self.robot_id, kf)] = pose
        self.pc_map.set_poses(self.estimates)
        for nbr, place in placements.items():
            self.placements[nbr] = place
            self._own_placement.add(nbr)
        self._pose_refresh = True

    def final_flush(self, now: int) -> None:
        """Forces a terminal optimization so exports reflect all data."""
        if self.queue or self._has_intra:
            self.optimize(now)
        if not self.fleet_estimates:
            self.fleet_estimates = {(self.robot_id, kf): pose
                                    for kf, pose in self.estimates.items()}

    # ------------------------------------------------------------------
    # outbox

    def _next_seq(self, kind: str) -> int:
        self._seq[kind] = self._seq.get(kind, 0) + 1
        return self._seq[kind]

    def _queue_msg(self, dst: int, kind: str, payload: bytes) -> None:
        self._deferred.append((dst, kind, payload))

    def _assemble_outbox(self, now: int,
                         requests_in: list[tuple[int, list[int]]],
                         new_requests: list[tuple[int, list[int]]]
                         ) -> list[Envelope]:
        # pose update: incremental by default, full refresh after an
        # optimization moved history
        if self._pose_refresh:
            poses = [(kf, self.estimates[kf]) for kf in range(self.kf_count)]
            self._pose_refresh = False
        else:
            poses = [(kf, self.estimates[kf])
                     for kf in range(self._pose_sent_upto, self.kf_count)]
        if poses:
            self._queue_msg(comms.BROADCAST, comms.KIND_POSE_UPDATE,
                            comms.encode_pose_update(
                                self.robot_id,
                                self._next_seq(comms.KIND_POSE_UPDATE), poses))
            self._pose_sent_upto = self.kf_count

        if len(self.object_map):
            payload = comms.encode_object_map(self.object_map, 0)
            body = payload[7:]
            if body != self._last_map_payload:
                self._last_map_payload = body
                self._queue_msg(
                    comms.BROADCAST, comms.KIND_OBJECT_MAP,
                    comms.encode_object_map(
                        self.object_map,
                        self._next_seq(comms.KIND_OBJECT_MAP)))

        for nbr, kfs in new_requests:
            self._queue_msg(nbr, comms.KIND_SCAN_REQUEST,
                            comms.encode_scan_request(
                                self.robot_id,
                                self._next_seq(comms.KIND_SCAN_REQUEST), kfs))

        scans_by_kf = {kf: pts for kf, _, pts in self.pc_map.frames}
        for requester, kfs in requests_in:
            for kf in kfs:
                if kf in scans_by_kf:
                    self._queue_msg(requester, comms.KIND_SCAN,
                                    comms.encode_scan(
                                        self.robot_id,
                                        self._next_seq(comms.KIND_SCAN), kf,
                                        scans_by_kf[kf]))

        newly_accepted = []
        for i in self.accepted:
            z = self.queue[i]
            if z.key() not in self._broadcast_closures:
                self._broadcast_closures.add(z.key())
                newly_accepted.append(z)
        if newly_accepted:
            self._queue_msg(comms.BROADCAST, comms.KIND_LOOP_CLOSURES,
                            comms.encode_loop_closures(
                                self.robot_id,
                                self._next_seq(comms.KIND_LOOP_CLOSURES),
                                newly_accepted))

        out: list[Envelope] = []
        used = 0.0
        while self._deferred:
            dst, kind, payload = self._deferred[0]
            bits = 8 * len(payload)
            if out and used + bits > self.params.budget_bits:
                break
            self._deferred.popleft()
            used += bits
            out.append(Envelope(src=self.robot_id, dst=dst, kind=kind,
                                payload=payload,
                                seq=_payload_seq(payload), sent_at=now))
        return out


def _payload_seq(payload: bytes) -> int:
    return int.from_bytes(payload[1:5], "little")


def _fuse_motions(m1: Pose2, cov1: np.ndarray, m2: Pose2,
                  cov2: np.ndarray) -> Pose2:
    """Information-weighted fusion of two motion measurements.

    Componentwise for diagonal covariances; the heading difference is
    wrapped before averaging so near-pi headings fuse correctly.
    """
    w1 = 1.0 / np.diag(cov1)
    w2 = 1.0 / np.diag(cov2)
    v1 = m1.as_array()
    v2 = v1.copy()
    v2[0], v2[1] = m2.x, m2.y
    v2[2] = v1[2] + wrap_angle(m2.theta - m1.theta)
    fused = (w1 * v1 + w2 * v2) / (w1 + w2)
    return Pose2(fused[0], fused[1], fused[2])
