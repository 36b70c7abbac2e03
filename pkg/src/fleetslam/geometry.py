"""Planar rigid-body geometry.

Poses are SE(2) elements (x, y, theta) with theta normalized to
(-pi, pi]. The composition convention is the usual homogeneous one:
compose(a, b) applies b in a's frame, and between(a, b) is the pose of
b expressed in a's frame, so compose(a, between(a, b)) == b. Points are
plain numpy arrays, a single point is shape (2,) and a cloud is (n, 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalizes an angle to the interval (-pi, pi].

    Args:
        theta: angle in radians.

    Returns:
        The equivalent angle in (-pi, pi]. Idempotent.
    """
    w = (theta + math.pi) % TWO_PI - math.pi
    if w <= -math.pi:
        w += TWO_PI
    return w


@dataclass(frozen=True)
class Pose2:
    """A planar pose: translation (x, y) and heading theta.

    theta is wrapped to (-pi, pi] at construction, so two poses that
    differ by full turns compare equal field-wise.
    """

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        """Returns the 2x2 rotation matrix of theta."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """Returns the 3x3 homogeneous transform."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "Pose2":
        """Builds a pose from a 3x3 homogeneous transform."""
        return Pose2(mat[0, 2], mat[1, 2], math.atan2(mat[1, 0], mat[0, 0]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @staticmethod
    def from_array(v) -> "Pose2":
        return Pose2(float(v[0]), float(v[1]), float(v[2]))


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Composes two poses: the result applies b in a's frame."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y,
                 a.y + s * b.x + c * b.y,
                 a.theta + b.theta)


def inverse(p: Pose2) -> Pose2:
    """Returns the pose q with compose(p, q) == identity."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.theta)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Returns the pose of b expressed in a's frame."""
    return compose(inverse(a), b)


def transform_point(p: Pose2, point) -> np.ndarray:
    """Maps a single point from p's frame into the parent frame."""
    point = np.asarray(point, dtype=np.float64)
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([p.x + c * point[0] - s * point[1],
                     p.y + s * point[0] + c * point[1]])


def transform_points(p: Pose2, points) -> np.ndarray:
    """Maps an (n, 2) cloud from p's frame into the parent frame."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return points.dot(p.rotation().T) + p.translation


def pose_norm(p: Pose2, weight: np.ndarray | None = None,
              angle_scale: float = 1.0) -> float:
    """Magnitude of a pose, used as a consistency distance.

    Args:
        p: pose whose size is measured.
        weight: optional 3x3 covariance; when given the result is the
            Mahalanobis norm sqrt(v^T weight^-1 v) of v = (x, y, theta)
            and angle_scale is ignored.
        angle_scale: unweighted mode multiplies theta^2 by this factor,
            trading radians against meters.

    Returns:
        Nonnegative scalar.

    Raises:
        numpy.linalg.LinAlgError: weight is singular.
    """
    v = p.as_array()
    if weight is None:
        return math.sqrt(v[0] * v[0] + v[1] * v[1]
                         + angle_scale * v[2] * v[2])
    sol = np.linalg.solve(np.asarray(weight, dtype=np.float64), v)
    return float(math.sqrt(max(v.dot(sol), 0.0)))


def check_covariance(mat) -> np.ndarray:
    """Validates a 3x3 covariance: symmetric, positive semidefinite.

    Returns:
        The matrix as a float64 array.

    Raises:
        ValueError: wrong shape, asymmetric beyond tolerance, or a
        negative eigenvalue beyond tolerance.
    """
    m = np.asarray(mat, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"covariance must be 3x3, got {m.shape}")
    if not np.allclose(m, m.T, atol=1e-9):
        raise ValueError("covariance must be symmetric")
    if np.linalg.eigvalsh(m).min() < -1e-9:
        raise ValueError("covariance must be positive semidefinite")
    return m


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> Pose2:
    """Least-squares rigid transform taking src points onto dst points.

    Closed-form planar Kabsch/Umeyama fit: the returned pose T minimizes
    sum ||T(src_i) - dst_i||^2 over rotations and translations.

    Args:
        src: (n, 2) source points, n >= 2.
        dst: (n, 2) destination points, same length.

    Returns:
        Pose2 with dst ~= transform_points(pose, src).

    Raises:
        ValueError: fewer than 2 points, mismatched lengths, or all
        source points coincident.
    """
    pose, _ = _fit(src, dst, with_scale=False)
    return pose


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> tuple[Pose2, float]:
    """Least-squares similarity transform (rotation, translation, scale).

    Points map as scale * R(theta) @ x + t. Same preconditions as
    fit_rigid.

    Returns:
        (pose, scale): the rigid part as a Pose2 and the uniform scale.
    """
    return _fit(src, dst, with_scale=True)


def _fit(src, dst, with_scale: bool) -> tuple[Pose2, float]:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape[0] < 2 or src.shape != dst.shape:
        raise ValueError("need at least 2 matched point pairs")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    q = src - cs
    p = dst - cd
    if not np.any(np.abs(q) > 1e-12):
        raise ValueError("source points are coincident")
    dot = float(np.sum(q * p))
    cross = float(np.sum(q[:, 0] * p[:, 1] - q[:, 1] * p[:, 0]))
    theta = math.atan2(cross, dot)
    c, s = math.cos(theta), math.sin(theta)
    scale = 1.0
    if with_scale:
        scale = math.hypot(dot, cross) / float(np.sum(q * q))
    tx = cd[0] - scale * (c * cs[0] - s * cs[1])
    ty = cd[1] - scale * (s * cs[0] + c * cs[1])
    return Pose2(tx, ty, theta), scale
