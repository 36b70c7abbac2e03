"""Mission simulation: worlds, sonar scans, odometry, ground truth.

A mission is a seeded, fully deterministic generation of one shared
world and, per robot, a true trajectory, noisy odometry increments,
and per-step sonar point scans. Ground truth stays on the simulation
side: robots only ever see odometry and scans, while the evaluation
layer uses the truth for labeling closures and computing errors.

Outlier injection is a simulation-side corruption hook: every
registration result whose local keyframe truly lies inside a configured
disc gets one shared world-frame offset, mimicking the correlated
registration failures that repeated structure causes in a real survey.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fleetslam.consistency import LoopClosure
from fleetslam.geometry import Pose2, between, compose, inverse

# named substreams of the mission seed
STREAM_WORLD = 0
STREAM_ODOM = 1
STREAM_SCAN = 2
STREAM_CHANNEL = 3
STREAM_NODE = 4


def rng_stream(seed: int, purpose: int, robot: int = 0) -> np.random.Generator:
    """Deterministic named RNG substream of a mission seed."""
    return np.random.default_rng([int(seed), int(purpose), int(robot)])


@dataclass(frozen=True)
class WorldObject:
    """One landmark: an axis-angled rectangle or a circle.

    Attributes:
        shape: "rect" or "circle".
        center: (2,) world position.
        dims: (length, breadth) for rectangles, (radius,) for circles.
        angle: rectangle long-side direction, ignored for circles.
    """

    shape: str
    center: tuple[float, float]
    dims: tuple[float, ...]
    angle: float = 0.0

    def boundary_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Samples n points uniformly along the boundary, world frame."""
        if self.shape == "circle":
            ang = rng.uniform(0.0, 2.0 * math.pi, n)
            r = self.dims[0]
            pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        else:
            length, breadth = self.dims[0], self.dims[1]
            half = np.array([length / 2.0, breadth / 2.0])
            perim = 2.0 * (length + breadth)
            t = rng.uniform(0.0, perim, n)
            pts = np.empty((n, 2))
            for i, ti in enumerate(t):
                if ti < length:
                    pts[i] = (-half[0] + ti, -half[1])
                elif ti < length + breadth:
                    pts[i] = (half[0], -half[1] + (ti - length))
                elif ti < 2 * length + breadth:
                    pts[i] = (half[0] - (ti - length - breadth), half[1])
                else:
                    pts[i] = (-half[0], half[1] - (ti - 2 * length - breadth))
            c, s = math.cos(self.angle), math.sin(self.angle)
            pts = pts @ np.array([[c, -s], [s, c]]).T
        return pts + np.asarray(self.center)


@dataclass
class World:
    """The shared set of landmarks."""

    objects: list[WorldObject] = field(default_factory=list)


@dataclass
class WorldSpec:
    """Random world generation parameters.

    Attributes:
        region: (x0, y0, x1, y1) box objects are placed in.
        count: number of objects.
        min_gap: minimum center-to-center separation.
        length_range: rectangle long side range.
        breadth_range: rectangle short side range.
        radius_range: circle radius range.
        circle_frac: fraction of circles.
        explicit: fixed objects used instead of random placement.
    """

    region: tuple[float, float, float, float] = (0.0, 0.0, 40.0, 30.0)
    count: int = 12
    min_gap: float = 6.0
    length_range: tuple[float, float] = (1.8, 3.6)
    breadth_range: tuple[float, float] = (0.9, 2.2)
    radius_range: tuple[float, float] = (0.8, 1.5)
    circle_frac: float = 0.3
    explicit: list[WorldObject] | None = None


def generate_world(spec: WorldSpec, rng: np.random.Generator) -> World:
    """Places objects in the region with rejection-sampled separation."""
    if spec.explicit is not None:
        return World(objects=list(spec.explicit))
    x0, y0, x1, y1 = spec.region
    centers: list[np.ndarray] = []
    objects: list[WorldObject] = []
    attempts = 0
    while len(objects) < spec.count and attempts < 200 * spec.count:
        attempts += 1
        c = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if centers and np.min(np.linalg.norm(np.array(centers) - c,
                                             axis=1)) < spec.min_gap:
            continue
        centers.append(c)
        if rng.random() < spec.circle_frac:
            objects.append(WorldObject(
                "circle", (float(c[0]), float(c[1])),
                (float(rng.uniform(*spec.radius_range)),)))
        else:
            objects.append(WorldObject(
                "rect", (float(c[0]), float(c[1])),
                (float(rng.uniform(*spec.length_range)),
                 float(rng.uniform(*spec.breadth_range))),
                float(rng.uniform(-math.pi / 2.0, math.pi / 2.0))))
    return World(objects=objects)


@dataclass
class SonarModel:
    """Forward-looking sonar parameters.

    Attributes:
        max_range: detection range, meters.
        aperture: full horizontal field of view, radians.
        noise_sigma: isotropic Gaussian noise on returns, meters.
        returns_min: fewest boundary samples per visible object.
        returns_max: most boundary samples per visible object.
    """

    max_range: float = 20.0
    aperture: float = math.radians(130.0)
    noise_sigma: float = 0.05
    returns_min: int = 4
    returns_max: int = 8


def simulate_scan(world: World, pose: Pose2, sonar: SonarModel,
                  rng: np.random.Generator) -> np.ndarray:
    """One sonar scan from a true pose.

    Every object contributes a random number of boundary samples; the
    samples inside the range and field-of-view cone survive and receive
    Gaussian noise. With zero noise the returned points lie exactly on
    object boundaries.

    Returns:
        (n, 2) points in the sensor (pose) frame, possibly empty.
    """
    inv_pose = inverse(pose)
    half_fov = sonar.aperture / 2.0
    kept: list[np.ndarray] = []
    for obj in world.objects:
        n = int(rng.integers(sonar.returns_min, sonar.returns_max + 1))
        pts = obj.boundary_points(n, rng)
        c, s = math.cos(inv_pose.theta), math.sin(inv_pose.theta)
        local = pts @ np.array([[c, -s], [s, c]]).T + \
            np.array([inv_pose.x, inv_pose.y])
        rng_ok = np.linalg.norm(local, axis=1) <= sonar.max_range
        fov_ok = np.abs(np.arctan2(local[:, 1], local[:, 0])) <= half_fov
        sel = local[rng_ok & fov_ok]
        if len(sel):
            kept.append(sel)
    if not kept:
        return np.zeros((0, 2))
    scan = np.concatenate(kept, axis=0)
    if sonar.noise_sigma > 0:
        scan = scan + rng.normal(0.0, sonar.noise_sigma, scan.shape)
    return scan


def simulate_odometry(motion: Pose2, sigma_xy: float, sigma_theta: float,
                      rng: np.random.Generator) -> Pose2:
    """Corrupts a true between-step motion with zero-mean noise."""
    eps = rng.normal(0.0, 1.0, 3)
    return Pose2(motion.x + sigma_xy * eps[0],
                 motion.y + sigma_xy * eps[1],
                 motion.theta + sigma_theta * eps[2])


@dataclass
class RobotSpec:
    """One robot's survey plan.

    Attributes:
        robot_id: small nonnegative integer id.
        waypoints: polyline the robot follows at constant speed.
        speed: meters per step.
    """

    robot_id: int
    waypoints: list[tuple[float, float]]
    speed: float = 1.0


def lawnmower(origin: tuple[float, float], length: float, spacing: float,
              rows: int, along_x: bool = True) -> list[tuple[float, float]]:
    """Boustrophedon waypoints covering a strip pattern."""
    x0, y0 = origin
    pts: list[tuple[float, float]] = []
    for r in range(rows):
        if along_x:
            a = (x0, y0 + r * spacing)
            b = (x0 + length, y0 + r * spacing)
        else:
            a = (x0 + r * spacing, y0)
            b = (x0 + r * spacing, y0 + length)
        pts.extend([a, b] if r % 2 == 0 else [b, a])
    return pts


def waypoint_trajectory(spec: RobotSpec, steps: int) -> list[Pose2]:
    """True poses along the waypoint polyline, heading along travel.

    The robot advances spec.speed per step and holds its last pose once
    the polyline is exhausted.
    """
    wps = [np.asarray(w, dtype=np.float64) for w in spec.waypoints]
    if len(wps) < 2:
        raise ValueError("need at least 2 waypoints")
    poses: list[Pose2] = []
    seg = 0
    pos = wps[0].copy()
    heading = math.atan2(*(wps[1] - wps[0])[::-1])
    for _ in range(steps):
        poses.append(Pose2(pos[0], pos[1], heading))
        remaining = spec.speed
        while remaining > 1e-12 and seg < len(wps) - 1:
            target = wps[seg + 1]
            d = target - pos
            dist = float(np.linalg.norm(d))
            if dist < 1e-12:
                seg += 1
                continue
            heading = math.atan2(d[1], d[0])
            if dist > remaining:
                pos = pos + d / dist * remaining
                remaining = 0.0
            else:
                pos = target.copy()
                remaining -= dist
                seg += 1
    return poses


@dataclass
class InjectSpec:
    """Region-correlated outlier injection.

    Attributes:
        center: (2,) world center of the corrupted region.
        radius: region radius, meters.
        offset: shared world-frame pose offset applied to affected
            closures.
    """

    center: tuple[float, float]
    radius: float
    offset: Pose2


def apply_injection(closure: LoopClosure, true_local_pose: Pose2,
                    inject: InjectSpec | None) -> tuple[LoopClosure, bool]:
    """Corrupts a closure when its local keyframe lies in the region.

    The offset is expressed in the world frame and conjugated into the
    keyframe frame, so every affected closure implies the same world
    displacement of the measured neighbor pose regardless of the
    keyframe's heading.

    Returns:
        (closure, injected): the possibly corrupted closure and whether
        the offset was applied.
    """
    if inject is None:
        return closure, False
    dx = true_local_pose.x - inject.center[0]
    dy = true_local_pose.y - inject.center[1]
    if math.hypot(dx, dy) > inject.radius:
        return closure, False
    delta_local = compose(compose(inverse(true_local_pose), inject.offset),
                          true_local_pose)
    corrupted = LoopClosure(
        local_robot=closure.local_robot, local_kf=closure.local_kf,
        neighbor_robot=closure.neighbor_robot,
        neighbor_kf=closure.neighbor_kf,
        measurement=compose(delta_local, closure.measurement),
        covariance=closure.covariance, overlap=closure.overlap,
        stamp=closure.stamp)
    return corrupted, True


@dataclass
class MissionSpec:
    """Complete, seedable description of a simulated mission."""

    seed: int = 0
    steps: int = 100
    world: WorldSpec = field(default_factory=WorldSpec)
    robots: list[RobotSpec] = field(default_factory=list)
    sonar: SonarModel = field(default_factory=SonarModel)
    odom_sigma_xy: float = 0.02
    odom_sigma_theta: float = 0.0035
    inject: InjectSpec | None = None


@dataclass
class MissionData:
    """Everything a mission produced, ground truth included.

    Attributes:
        spec: the generating spec.
        world: the shared landmark set.
        true_poses: per robot, world-frame pose per step.
        odometry: per robot, noisy measured motion between consecutive
            steps (length steps - 1).
        scans: per robot, sensor-frame scan per step.
    """

    spec: MissionSpec
    world: World
    true_poses: dict[int, list[Pose2]]
    odometry: dict[int, list[Pose2]]
    scans: dict[int, list[np.ndarray]]

    def robot_ids(self) -> list[int]:
        return sorted(self.true_poses)

    def true_position(self, robot: int, step: int) -> np.ndarray:
        p = self.true_poses[robot][step]
        return np.array([p.x, p.y])


def run_mission(spec: MissionSpec) -> MissionData:
    """Generates the world and every robot's streams deterministically.

    The same spec always produces identical data; robots draw from
    independent named substreams so adding a robot does not disturb the
    others' noise.
    """
    world = generate_world(spec.world, rng_stream(spec.seed, STREAM_WORLD))
    true_poses: dict[int, list[Pose2]] = {}
    odometry: dict[int, list[Pose2]] = {}
    scans: dict[int, list[np.ndarray]] = {}
    for rspec in spec.robots:
        rid = rspec.robot_id
        poses = waypoint_trajectory(rspec, spec.steps)
        true_poses[rid] = poses
        odom_rng = rng_stream(spec.seed, STREAM_ODOM, rid)
        odometry[rid] = [
            simulate_odometry(between(poses[t], poses[t + 1]),
                              spec.odom_sigma_xy, spec.odom_sigma_theta,
                              odom_rng)
            for t in range(spec.steps - 1)]
        scan_rng = rng_stream(spec.seed, STREAM_SCAN, rid)
        scans[rid] = [simulate_scan(world, poses[t], spec.sonar, scan_rng)
                      for t in range(spec.steps)]
    return MissionData(spec=spec, world=world, true_poses=true_poses,
                       odometry=odometry, scans=scans)


def is_true_positive(closure: LoopClosure,
                     true_poses: dict[int, list[Pose2]],
                     tol_trans: float = 1.5,
                     tol_rot: float = math.radians(15.0)) -> bool:
    """Labels a closure against ground truth.

    True positive means the measured relative pose is within tol_trans
    meters and tol_rot radians of the true relative pose between the
    two keyframes.
    """
    truth = between(true_poses[closure.local_robot][closure.local_kf],
                    true_poses[closure.neighbor_robot][closure.neighbor_kf])
    err = between(truth, closure.measurement)
    return (math.hypot(err.x, err.y) <= tol_trans
            and abs(err.theta) <= tol_rot)


def dead_reckoning(odometry: list[Pose2], start: Pose2 | None = None
                   ) -> list[Pose2]:
    """Integrates measured motions from a start pose (identity default)."""
    pose = start or Pose2()
    out = [pose]
    for motion in odometry:
        pose = compose(pose, motion)
        out.append(pose)
    return out


def mission_two_robot(seed: int = 0, steps: int = 120) -> MissionSpec:
    """Two robots surveying adjacent bands of one field side by side.

    Both launch from the x = 0 edge so their sonar swaths share the
    middle band from the first step on; co-visible objects, and with
    them inter-robot closures, accumulate throughout the mission
    instead of only after the trajectories cross.
    """
    return MissionSpec(
        seed=seed, steps=steps,
        world=WorldSpec(region=(4.0, 4.0, 44.0, 26.0), count=12,
                        min_gap=6.0),
        robots=[
            RobotSpec(0, lawnmower((0.0, 0.0), 48.0, 10.0, 3), 1.0),
            RobotSpec(1, lawnmower((0.0, 30.0), 48.0, -10.0, 3), 1.0),
        ],
        sonar=SonarModel(max_range=18.0, returns_min=10, returns_max=16),
    )


def mission_three_robot(seed: int = 0, steps: int = 110) -> MissionSpec:
    """Three robots in overlapping horizontal bands of one field."""
    return MissionSpec(
        seed=seed, steps=steps,
        world=WorldSpec(region=(4.0, 4.0, 44.0, 40.0), count=15,
                        min_gap=6.0),
        robots=[
            RobotSpec(0, lawnmower((0.0, 0.0), 48.0, 9.0, 3), 1.0),
            RobotSpec(1, lawnmower((48.0, 22.0), -48.0, -9.0, 3), 1.0),
            RobotSpec(2, lawnmower((0.0, 26.0), 48.0, 9.0, 3), 1.0),
        ],
        sonar=SonarModel(max_range=18.0, returns_min=10, returns_max=16),
    )


def mission_four_robot_outliers(seed: int = 0,
                                steps: int = 110) -> MissionSpec:
    """Outlier-injection scenario with three neighbor pairs.

    Robot 0 surveys the whole field and overlaps robot 1 across a wide
    band, building up plenty of mutually consistent closures. Robots 2
    and 3 only brush one corner region of robot 0's coverage; every
    closure whose local keyframe falls inside that region receives one
    shared offset, so each of the three neighbor pairs (0-1, 0-2, 0-3)
    produces corrupted closures there.
    """
    region_center = (44.0, 34.0)
    return MissionSpec(
        seed=seed, steps=steps,
        world=WorldSpec(region=(4.0, 4.0, 48.0, 40.0), count=16,
                        min_gap=6.0),
        robots=[
            RobotSpec(0, lawnmower((0.0, 0.0), 52.0, 9.0, 4), 1.0),
            RobotSpec(1, lawnmower((52.0, 18.0), -52.0, -9.0, 3), 1.0),
            RobotSpec(2, [(56.0, 24.0), (40.0, 38.0), (24.0, 44.0)], 1.0),
            RobotSpec(3, [(30.0, 46.0), (46.0, 36.0), (58.0, 28.0)], 1.0),
        ],
        sonar=SonarModel(max_range=18.0, returns_min=10, returns_max=16),
        inject=InjectSpec(center=region_center, radius=10.0,
                          offset=Pose2(1.4, 0.9, 0.0)),
    )
