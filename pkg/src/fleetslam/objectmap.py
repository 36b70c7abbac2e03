"""Object map construction from accumulated sonar returns.

Each robot folds its keyframe scans into a 2D point cloud map, clusters
the points by density, and summarizes every well-supported cluster as an
oriented bounding rectangle. The resulting list of boxes is the compact
"object map" that gets exchanged between robots in place of raw clouds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from fleetslam import backend
from fleetslam.geometry import Pose2, transform_points, wrap_angle


@dataclass
class ObjectMapParams:
    """Clustering and filtering knobs for object map construction.

    Attributes:
        eps: DBSCAN neighborhood radius in meters.
        min_pts: DBSCAN core-point threshold, neighborhood size
            counting the point itself.
        n_min: minimum cluster support (points) to keep an object.
        d_min: minimum longest rectangle side to keep an object, meters.
    """

    eps: float = 1.0
    min_pts: int = 5
    n_min: int = 20
    d_min: float = 1.0


@dataclass(frozen=True)
class ObjectBox:
    """An object summarized as an oriented bounding rectangle.

    Attributes:
        id: index of the object within its map, dense from 0.
        center: (2,) rectangle center in the map frame.
        length: longer side, length >= breadth > 0.
        breadth: shorter side.
        orientation: direction of the long side, in (-pi/2, pi/2].
        support: number of cluster points the box summarizes.
    """

    id: int
    center: np.ndarray
    length: float
    breadth: float
    orientation: float
    support: int

    def __post_init__(self):
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=np.float64))
        if not (self.length >= self.breadth > 0.0):
            raise ValueError("rectangle sides must satisfy length >= "
                             f"breadth > 0, got {self.length}, {self.breadth}")
        if self.support < 1:
            raise ValueError("support must be positive")


@dataclass
class ObjectMap:
    """A robot's current set of object boxes.

    Attributes:
        robot_id: owner of the map.
        objects: boxes with dense unique ids 0..n-1.
        stamp: timestep at which the map was built.
    """

    robot_id: int
    objects: list[ObjectBox] = field(default_factory=list)
    stamp: int = 0

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")

    def __len__(self) -> int:
        return len(self.objects)

    def centers(self) -> np.ndarray:
        """Returns all object centers stacked as an (n, 2) array."""
        if not self.objects:
            return np.zeros((0, 2))
        return np.stack([o.center for o in self.objects])


@dataclass
class PointCloudMap:
    """Keyframe-indexed point cloud map of one robot.

    Frames hold the raw scan points in the keyframe's own (sensor)
    frame together with the keyframe pose in the robot's map frame; the
    pose may be refreshed after every optimization without touching the
    points.
    """

    robot_id: int
    frames: list[tuple[int, Pose2, np.ndarray]] = field(default_factory=list)

    def add_frame(self, keyframe: int, pose: Pose2, points) -> None:
        """Appends a keyframe.

        Args:
            keyframe: index, strictly greater than the last one.
            pose: keyframe pose in the map frame.
            points: (n, 2) scan points in the keyframe frame.

        Raises:
            ValueError: keyframe index does not increase.
        """
        if self.frames and keyframe <= self.frames[-1][0]:
            raise ValueError("keyframe indices must be strictly increasing")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self.frames.append((keyframe, pose, pts))

    def keyframes(self) -> list[int]:
        return [kf for kf, _, _ in self.frames]

    def set_poses(self, poses: dict[int, Pose2]) -> None:
        """Replaces frame poses from an estimate dictionary."""
        self.frames = [(kf, poses.get(kf, pose), pts)
                       for kf, pose, pts in self.frames]

    def all_points(self) -> np.ndarray:
        """All points transformed into the map frame, frame order."""
        clouds = [transform_points(pose, pts)
                  for _, pose, pts in self.frames if len(pts)]
        if not clouds:
            return np.zeros((0, 2))
        return np.concatenate(clouds, axis=0)


def dbscan(points, eps: float, min_pts: int) -> list[list[int]]:
    """Density-based clustering with deterministic tie-breaking.

    A point is a core point when its eps-neighborhood, itself included,
    holds at least min_pts points. Clusters are the connected components
    of core points under eps-adjacency; a non-core point with core
    neighbors joins the cluster of its lowest-indexed core neighbor.
    Points with no core neighbor are noise and appear in no cluster.

    Args:
        points: (n, 2) array of points.
        eps: neighborhood radius, > 0.
        min_pts: core threshold, >= 1.

    Returns:
        Clusters as lists of point indices, each sorted ascending, and
        the cluster list ordered by its smallest member index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts >= 1")
    if n == 0:
        return []
    indptr, indices = backend.radius_csr(pts, eps)
    degree = np.diff(indptr)
    core = degree + 1 >= min_pts

    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for seed in range(n):
        if not core[seed] or labels[seed] >= 0:
            continue
        labels[seed] = next_label
        stack = [seed]
        while stack:
            i = stack.pop()
            for j in indices[indptr[i]:indptr[i + 1]]:
                if core[j] and labels[j] < 0:
                    labels[j] = next_label
                    stack.append(j)
        next_label += 1

    # border points: lowest-indexed core neighbor decides the cluster
    for i in range(n):
        if core[i] or labels[i] >= 0:
            continue
        for j in indices[indptr[i]:indptr[i + 1]]:
            if core[j]:
                labels[i] = labels[j]
                break

    clusters: list[list[int]] = [[] for _ in range(next_label)]
    for i in range(n):
        if labels[i] >= 0:
            clusters[labels[i]].append(i)
    clusters.sort(key=lambda c: c[0])
    return clusters


def bounding_rect(points) -> tuple[np.ndarray, float, float, float]:
    """Minimum-area oriented rectangle enclosing a point set.

    Uses the rotating-calipers fact that some side of the optimal
    rectangle is collinear with a convex hull edge, so only hull edge
    directions need to be searched. Collinear inputs yield a degenerate
    rectangle with zero breadth.

    Args:
        points: (n, 2) array with at least 2 distinct points.

    Returns:
        (center, length, breadth, orientation): center of the rectangle,
        sides with length >= breadth >= 0, and the direction of the long
        side normalized to (-pi/2, pi/2].

    Raises:
        ValueError: fewer than 2 distinct points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    uniq = np.unique(pts, axis=0)
    if uniq.shape[0] < 2:
        raise ValueError("need at least 2 distinct points")
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError:
        # collinear: span direction via the farthest point pair proxy
        d = uniq - uniq[0]
        far = int(np.argmax(np.einsum("ij,ij->i", d, d)))
        ang = float(np.arctan2(d[far, 1], d[far, 0]))
        hull = uniq
        angles = np.array([ang])
    else:
        edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
        angles = np.arctan2(edges[:, 1], edges[:, 0])

    best = None
    for ang in angles:
        c, s = np.cos(-ang), np.sin(-ang)
        rot = hull @ np.array([[c, -s], [s, c]]).T
        lo = rot.min(axis=0)
        hi = rot.max(axis=0)
        w, h = hi - lo
        area = w * h
        if best is None or area < best[0] - 1e-15:
            mid = (lo + hi) / 2.0
            center = np.array([np.cos(ang) * mid[0] - np.sin(ang) * mid[1],
                               np.sin(ang) * mid[0] + np.cos(ang) * mid[1]])
            if w >= h:
                length, breadth, orient = w, h, ang
            else:
                length, breadth, orient = h, w, ang + np.pi / 2.0
            if breadth < 1e-12 * max(length, 1.0):
                breadth = 0.0
            best = (area, center, float(length), float(breadth),
                    _wrap_half(orient))
    return best[1], best[2], best[3], best[4]


def _wrap_half(theta: float) -> float:
    """Normalizes an undirected axis angle to (-pi/2, pi/2]."""
    w = wrap_angle(theta)
    if w <= -np.pi / 2.0:
        w += np.pi
    elif w > np.pi / 2.0:
        w -= np.pi
    return float(w)


def build_object_map(pc_map: PointCloudMap, params: ObjectMapParams,
                     stamp: int = 0) -> ObjectMap:
    """Clusters a point cloud map into an object map.

    Points are brought into the robot's map frame using the current
    keyframe poses, clustered with dbscan, and every cluster with
    strictly more than n_min points whose bounding rectangle's long
    side strictly exceeds d_min becomes an ObjectBox. Object ids are
    assigned densely in cluster order, which is deterministic for a
    fixed map.

    Args:
        pc_map: source point cloud map.
        params: clustering and filter thresholds.
        stamp: timestep recorded on the result.

    Returns:
        ObjectMap, possibly empty.
    """
    pts = pc_map.all_points()
    boxes: list[ObjectBox] = []
    if pts.shape[0] >= params.min_pts:
        for cluster in dbscan(pts, params.eps, params.min_pts):
            if len(cluster) <= params.n_min:
                continue
            center, length, breadth, orient = bounding_rect(pts[cluster])
            if length <= params.d_min or breadth <= 0.0:
                continue
            boxes.append(ObjectBox(id=len(boxes), center=center,
                                   length=length, breadth=breadth,
                                   orientation=orient,
                                   support=len(cluster)))
    return ObjectMap(robot_id=pc_map.robot_id, objects=boxes, stamp=stamp)


def dump_point_cloud_csv(pc_map: PointCloudMap, path) -> None:
    """Writes a point cloud map as CSV rows for offline inspection.

    Columns: keyframe, pose_x, pose_y, pose_theta, px, py with the
    point columns in the keyframe's own frame.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["keyframe", "pose_x", "pose_y", "pose_theta",
                         "px", "py"])
        for kf, pose, pts in pc_map.frames:
            for p in pts:
                writer.writerow([kf, repr(pose.x), repr(pose.y),
                                 repr(pose.theta), repr(float(p[0])),
                                 repr(float(p[1]))])
