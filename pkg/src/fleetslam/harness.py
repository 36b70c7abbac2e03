"""Experiment harness: configured runs, comparisons, sweeps, artifacts.

A run wires the simulator, the per-robot nodes, and the channel into
the serial-barrier event loop: every step all nodes tick (producing
outboxes), then the channel delivers, and the deliveries become next
step's inboxes. After the mission a few silent sync ticks flush queued
traffic, every node runs a terminal optimization, and the evaluation
layer scores estimates against ground truth.

All artifacts under the output directory are deterministic for a fixed
config except runtime.csv, which holds wall-clock stage timings.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from fleetslam import comms, sim
from fleetslam.comms import Channel, ChannelConfig
from fleetslam.consistency import dump_consistency_csv
from fleetslam.geometry import Pose2, compose
from fleetslam.metrics import (AteResult, CandidateRecord, MetricsReport,
                               SweepRow, compute_ate, sweep_overlap)
from fleetslam.robot import NodeParams, RobotNode
from fleetslam.sim import (InjectSpec, MissionData, MissionSpec, RobotSpec,
                           SonarModel, WorldObject, WorldSpec,
                           apply_injection, dead_reckoning, is_true_positive,
                           mission_four_robot_outliers, mission_three_robot,
                           mission_two_robot, rng_stream, run_mission)

MISSIONS = {
    "two_robot": mission_two_robot,
    "three_robot": mission_three_robot,
    "four_robot_outliers": mission_four_robot_outliers,
}


class ConfigError(ValueError):
    """Invalid run configuration (maps to exit code 1)."""


@dataclass
class RunConfig:
    """One experiment's configuration.

    Attributes:
        mission: canned mission name or a path to a mission YAML.
        seed: overrides the mission seed when not None.
        steps: overrides the mission length when not None.
        consistency_mode: "gcm" or "pcm".
        pgo_mode: "two_step" or "full".
        window: registration window half-width.
        epsilon_overlap: registration acceptance gate.
        node: base node parameters; mode/window/epsilon are applied on
            top of this.
        channel: channel model.
        sync_ticks: extra silent ticks at mission end.
        out_dir: artifact directory, nothing written when None.
    """

    mission: str = "two_robot"
    seed: int | None = None
    steps: int | None = None
    consistency_mode: str = "gcm"
    pgo_mode: str = "two_step"
    window: int = 3
    epsilon_overlap: float = 0.9
    node: NodeParams = field(default_factory=NodeParams)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    sync_ticks: int = 3
    out_dir: str | None = None

    def validate(self) -> None:
        if self.consistency_mode not in ("gcm", "pcm"):
            raise ConfigError(
                f"consistency_mode must be gcm or pcm, "
                f"got {self.consistency_mode!r}")
        if self.pgo_mode not in ("two_step", "full"):
            raise ConfigError(
                f"pgo_mode must be two_step or full, got {self.pgo_mode!r}")
        if self.window < 0:
            raise ConfigError("window must be nonnegative")
        if not 0.0 <= self.epsilon_overlap <= 1.0:
            raise ConfigError("epsilon_overlap must lie in [0, 1]")
        if self.mission not in MISSIONS and not os.path.exists(self.mission):
            raise ConfigError(f"unknown mission {self.mission!r}")


@dataclass
class RunResult:
    """Everything one run produced."""

    config: RunConfig
    mission: MissionData
    nodes: dict[int, RobotNode]
    channel: Channel
    report: MetricsReport
    candidates: list[CandidateRecord]
    injected_keys: set[tuple[int, int, int, int]]


def load_mission(config: RunConfig) -> MissionSpec:
    """Resolves the configured mission and applies overrides."""
    seed = config.seed if config.seed is not None else 0
    if config.mission in MISSIONS:
        spec = MISSIONS[config.mission](seed=seed)
    else:
        spec = mission_from_yaml(config.mission)
        if config.seed is not None:
            spec = replace(spec, seed=config.seed)
    if config.steps is not None:
        spec = replace(spec, steps=config.steps)
    return spec


def _node_params(config: RunConfig, spec: MissionSpec) -> NodeParams:
    node = replace(
        config.node,
        registration=replace(config.node.registration,
                             window=config.window,
                             epsilon_overlap=config.epsilon_overlap),
        consistency=replace(config.node.consistency,
                            mode=config.consistency_mode),
        pgo_mode=config.pgo_mode,
        odom_sigma_xy=spec.odom_sigma_xy,
        odom_sigma_theta=spec.odom_sigma_theta,
        budget_bits=config.channel.budget_bits,
    )
    return node


def run(config: RunConfig) -> RunResult:
    """Executes one configured run end to end."""
    config.validate()
    spec = load_mission(config)
    mission = run_mission(spec)
    params = _node_params(config, spec)

    nodes: dict[int, RobotNode] = {}
    injected_keys: set[tuple[int, int, int, int]] = set()
    for rspec in spec.robots:
        rid = rspec.robot_id
        node = RobotNode(rid, params,
                         rng=rng_stream(spec.seed, sim.STREAM_NODE, rid))
        if spec.inject is not None:
            node.injection_hook = _make_injection_hook(
                mission, spec.inject, injected_keys)
        nodes[rid] = node

    channel = Channel(config=config.channel,
                      rng=rng_stream(spec.seed, sim.STREAM_CHANNEL))
    inboxes: dict[int, list] = {}
    total = spec.steps + config.sync_ticks
    for t in range(total):
        outgoing = []
        for rid in sorted(nodes):
            if t < spec.steps:
                odom = mission.odometry[rid][t - 1] if t > 0 else None
                keyframe = (odom, mission.scans[rid][t])
            else:
                keyframe = None
            outgoing.extend(nodes[rid].tick(t, inboxes.get(rid, []),
                                            keyframe))
        positions = {rid: mission.true_position(rid, min(t, spec.steps - 1))
                     for rid in nodes}
        inboxes = channel.step(t, outgoing, positions)
    for rid in sorted(nodes):
        nodes[rid].final_flush(total)

    report, candidates = evaluate(mission, nodes, channel, injected_keys)
    result = RunResult(config=config, mission=mission, nodes=nodes,
                       channel=channel, report=report,
                       candidates=candidates, injected_keys=injected_keys)
    if config.out_dir:
        write_artifacts(result, config.out_dir)
    return result


def _make_injection_hook(mission: MissionData, inject: InjectSpec,
                         injected_keys: set):
    def hook(closure):
        true_pose = mission.true_poses[closure.local_robot][closure.local_kf]
        corrupted, did = apply_injection(closure, true_pose, inject)
        if did:
            injected_keys.add(corrupted.key())
        return corrupted
    return hook


def estimate_set(node: RobotNode,
                 mission: MissionData) -> dict[int, list[tuple[int, Pose2]]]:
    """One robot's estimates of the whole fleet, local frame.

    The robot's own keyframes come from its optimized trajectory.
    Neighbors come from the optimized fleet estimates where available;
    otherwise the relayed trajectory is placed rigidly by the best
    known map transform (closure-derived, else match-derived). Robots
    the node knows nothing about are placed at identity, which honestly
    penalizes the estimate.
    """
    steps = mission.spec.steps
    out: dict[int, list[tuple[int, Pose2]]] = {}
    for rid in mission.robot_ids():
        poses: list[tuple[int, Pose2]] = []
        if rid == node.robot_id:
            for kf in range(steps):
                poses.append((kf, node.estimates.get(kf, Pose2())))
        else:
            fleet = {kf: p for (r, kf), p in node.fleet_estimates.items()
                     if r == rid}
            relayed = node.relayed_poses.get(rid, {})
            place = node.placements.get(rid, node.match_tf.get(rid, Pose2()))
            last = Pose2()
            for kf in range(steps):
                if kf in fleet:
                    last = fleet[kf]
                elif kf in relayed:
                    last = compose(place, relayed[kf])
                poses.append((kf, last))
        out[rid] = poses
    return out


def truth_set(mission: MissionData) -> dict[int, list[tuple[int, Pose2]]]:
    return {rid: list(enumerate(mission.true_poses[rid]))
            for rid in mission.robot_ids()}


def dead_reckoning_ate(mission: MissionData) -> float:
    """ATE of raw odometry integration from true start poses."""
    truth = truth_set(mission)
    est = {rid: list(enumerate(
        dead_reckoning(mission.odometry[rid],
                       start=mission.true_poses[rid][0])))
        for rid in mission.robot_ids()}
    return compute_ate(est, truth).overall


def evaluate(mission: MissionData, nodes: dict[int, RobotNode],
             channel: Channel, injected_keys: set
             ) -> tuple[MetricsReport, list[CandidateRecord]]:
    """Scores a finished run."""
    truth = truth_set(mission)
    report = MetricsReport()
    report.ate_dr = dead_reckoning_ate(mission)
    candidates: list[CandidateRecord] = []
    tp = 0
    n_gate = 0
    outliers_accepted = 0
    for rid in sorted(nodes):
        node = nodes[rid]
        report.ate_slam[rid] = compute_ate(estimate_set(node, mission),
                                           truth).overall
        report.accepted[rid] = len(node.accepted)
        accepted_keys = {node.queue[i].key() for i in node.accepted}
        outliers_accepted += len(accepted_keys & injected_keys)
        for rec in node.reg_log:
            if rec.closure is None:
                continue
            label = is_true_positive(rec.closure, mission.true_poses)
            candidates.append(CandidateRecord(overlap=rec.overlap,
                                              true_positive=label))
            n_gate += 1
            tp += int(label)
        report.malformed += node.malformed
    report.candidates = n_gate
    report.true_positives = tp
    report.precision = tp / n_gate if n_gate else 1.0
    report.outliers_injected = len(injected_keys)
    report.outliers_accepted = outliers_accepted
    report.message_stats = channel.kind_stats()
    report.budget_violations = len(channel.violations)
    return report, candidates


# ----------------------------------------------------------------------
# artifacts


def write_artifacts(result: RunResult, out_dir: str) -> None:
    """Writes metrics, trajectories, logs, and runtime stats."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "trajectories"), exist_ok=True)

    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerows(result.report.rows())

    for rid in sorted(result.nodes):
        node = result.nodes[rid]
        path = os.path.join(out_dir, "trajectories", f"robot{rid}.txt")
        with open(path, "w") as fh:
            for kf in range(result.mission.spec.steps):
                p = node.estimates.get(kf, Pose2())
                fh.write(f"{kf} {p.x!r} {p.y!r} {p.theta!r}\n")
        est = estimate_set(node, result.mission)
        for other in sorted(est):
            path = os.path.join(out_dir, "trajectories",
                                f"robot{rid}_est_robot{other}.txt")
            with open(path, "w") as fh:
                for kf, p in est[other]:
                    fh.write(f"{kf} {p.x!r} {p.y!r} {p.theta!r}\n")

    with open(os.path.join(out_dir, "messages.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "src", "dst", "kind", "seq", "bits",
                         "delivered"])
        for row in result.channel.log:
            writer.writerow([row.step, row.src, row.dst, row.kind, row.seq,
                             row.bits, row.delivered])

    with open(os.path.join(out_dir, "registrations.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["robot", "stamp", "neighbor", "neighbor_kf",
                         "local_kf", "converged", "overlap", "rms",
                         "gate_passed", "injected"])
        for rid in sorted(result.nodes):
            for rec in result.nodes[rid].reg_log:
                writer.writerow([rid, rec.stamp, rec.neighbor_robot,
                                 rec.neighbor_kf, rec.local_kf,
                                 int(rec.converged), repr(rec.overlap),
                                 repr(rec.rms), int(rec.gate_passed),
                                 int(rec.injected)])

    for rid in sorted(result.nodes):
        node = result.nodes[rid]
        if node.params.consistency.mode == "gcm":
            dump_consistency_csv(
                node._gcm_graph,
                os.path.join(out_dir, f"consistency_robot{rid}.csv"),
                accepted=node.accepted)

    with open(os.path.join(out_dir, "runtime.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["robot", "stage", "calls", "mean_ms", "max_ms"])
        for rid in sorted(result.nodes):
            for stage, times in sorted(result.nodes[rid].stage_times.items()):
                if not times:
                    continue
                writer.writerow([rid, stage, len(times),
                                 f"{1e3 * float(np.mean(times)):.3f}",
                                 f"{1e3 * float(np.max(times)):.3f}"])


def write_mission_csv(mission: MissionData, out_dir: str) -> None:
    """Writes ground truth, odometry, scans, and the world as CSVs."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "world.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape", "cx", "cy", "dims", "angle"])
        for obj in mission.world.objects:
            writer.writerow([obj.shape, repr(obj.center[0]),
                             repr(obj.center[1]),
                             " ".join(repr(d) for d in obj.dims),
                             repr(obj.angle)])
    for rid in mission.robot_ids():
        with open(os.path.join(out_dir, f"truth_robot{rid}.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "x", "y", "theta"])
            for t, p in enumerate(mission.true_poses[rid]):
                writer.writerow([t, repr(p.x), repr(p.y), repr(p.theta)])
        with open(os.path.join(out_dir, f"odometry_robot{rid}.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "dx", "dy", "dtheta"])
            for t, p in enumerate(mission.odometry[rid]):
                writer.writerow([t + 1, repr(p.x), repr(p.y), repr(p.theta)])
        with open(os.path.join(out_dir, f"scans_robot{rid}.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "px", "py"])
            for t, scan in enumerate(mission.scans[rid]):
                for pt in scan:
                    writer.writerow([t, repr(float(pt[0])),
                                     repr(float(pt[1]))])


# ----------------------------------------------------------------------
# verbs beyond run


def compare(config: RunConfig, axis: str) -> list[tuple[str, MetricsReport]]:
    """Runs paired variants of one config along a named axis."""
    if axis == "consistency":
        variants = [("gcm", replace(config, consistency_mode="gcm")),
                    ("pcm", replace(config, consistency_mode="pcm"))]
    elif axis == "pgo":
        variants = [("two_step", replace(config, pgo_mode="two_step")),
                    ("full", replace(config, pgo_mode="full"))]
    elif axis == "window":
        variants = [(f"window{w}", replace(config, window=w))
                    for w in (0, 1, 3)]
    else:
        raise ConfigError(f"unknown compare axis {axis!r}")
    out = []
    for label, cfg in variants:
        if config.out_dir:
            cfg = replace(cfg, out_dir=os.path.join(config.out_dir, label))
        out.append((label, run(cfg).report))
    return out


def sweep(config: RunConfig, thresholds: list[float]) -> list[SweepRow]:
    """Evaluates the overlap gate at multiple thresholds from one run.

    The run is executed with the lowest threshold so every candidate
    that could pass any of them is registered, then each threshold is
    applied offline.
    """
    if not thresholds:
        raise ConfigError("sweep needs at least one threshold")
    base = replace(config, epsilon_overlap=min(min(thresholds),
                                               config.epsilon_overlap))
    result = run(base)
    rows = sweep_overlap(result.candidates, thresholds)
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(os.path.join(config.out_dir, "sweep.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "detected", "true_positives",
                             "precision"])
            for row in rows:
                writer.writerow([repr(row.threshold), row.detected,
                                 row.true_positives, repr(row.precision)])
    return rows


# ----------------------------------------------------------------------
# mission YAML


def mission_from_yaml(path: str) -> MissionSpec:
    """Loads a mission spec from YAML.

    Schema (all keys optional unless noted):

        seed: 7
        steps: 120
        world:
          region: [x0, y0, x1, y1]
          count: 12
          min_gap: 6.0
          objects:            # explicit placement instead of random
            - {shape: rect, center: [x, y], dims: [l, b], angle: 0.3}
        robots:               # required, >= 1
          - id: 0
            waypoints: [[0, 0], [40, 0]]
            speed: 1.0
          - id: 1
            lawnmower: {origin: [48, 30], length: -48, spacing: -10, rows: 3}
        sonar: {max_range: 14, aperture_deg: 130, noise_sigma: 0.05,
                returns: [4, 8]}
        odometry: {sigma_xy: 0.02, sigma_theta: 0.0035}
        inject: {center: [x, y], radius: 8, offset: [dx, dy, dtheta]}
    """
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load mission {path!r}: {exc}") from exc
    try:
        return _mission_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mission {path!r}: {exc}") from exc


def _mission_from_dict(doc: dict) -> MissionSpec:
    world_doc = doc.get("world", {})
    if "objects" in world_doc:
        explicit = [WorldObject(shape=o["shape"],
                                center=tuple(o["center"]),
                                dims=tuple(o["dims"]),
                                angle=float(o.get("angle", 0.0)))
                    for o in world_doc["objects"]]
        world = WorldSpec(explicit=explicit)
    else:
        world = WorldSpec(
            region=tuple(world_doc.get("region", (0.0, 0.0, 40.0, 30.0))),
            count=int(world_doc.get("count", 12)),
            min_gap=float(world_doc.get("min_gap", 6.0)))

    robots = []
    for rdoc in doc["robots"]:
        if "lawnmower" in rdoc:
            lm = rdoc["lawnmower"]
            wps = sim.lawnmower(tuple(lm["origin"]), float(lm["length"]),
                                float(lm["spacing"]), int(lm["rows"]),
                                bool(lm.get("along_x", True)))
        else:
            wps = [tuple(w) for w in rdoc["waypoints"]]
        robots.append(RobotSpec(robot_id=int(rdoc["id"]), waypoints=wps,
                                speed=float(rdoc.get("speed", 1.0))))

    sonar_doc = doc.get("sonar", {})
    sonar = SonarModel(
        max_range=float(sonar_doc.get("max_range", 20.0)),
        aperture=math.radians(float(sonar_doc.get("aperture_deg", 130.0))),
        noise_sigma=float(sonar_doc.get("noise_sigma", 0.05)),
        returns_min=int(sonar_doc.get("returns", [4, 8])[0]),
        returns_max=int(sonar_doc.get("returns", [4, 8])[1]))

    odo = doc.get("odometry", {})
    inject = None
    if "inject" in doc:
        idoc = doc["inject"]
        off = idoc["offset"]
        inject = InjectSpec(center=tuple(idoc["center"]),
                            radius=float(idoc["radius"]),
                            offset=Pose2(off[0], off[1], off[2]))
    return MissionSpec(
        seed=int(doc.get("seed", 0)),
        steps=int(doc.get("steps", 100)),
        world=world, robots=robots, sonar=sonar,
        odom_sigma_xy=float(odo.get("sigma_xy", 0.02)),
        odom_sigma_theta=float(odo.get("sigma_theta", 0.0035)),
        inject=inject)
