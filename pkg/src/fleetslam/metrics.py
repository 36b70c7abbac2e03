"""Evaluation: trajectory error, detection quality, sweep curves.

Absolute trajectory error follows the planar convention used for
multi-robot surveys: the estimate set under evaluation (the local
robot's trajectory plus its estimates of every neighbor) is
concatenated robot-by-robot, rigidly aligned to the concatenated ground
truth with a single closed-form fit, and scored as the RMSE of the
translational residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fleetslam.geometry import Pose2, fit_rigid, transform_points


@dataclass
class AteResult:
    """Concatenated-alignment trajectory error.

    Attributes:
        overall: RMSE over every pose in the concatenated set.
        per_robot: RMSE restricted to each robot's segment, under the
            same single alignment.
    """

    overall: float
    per_robot: dict[int, float] = field(default_factory=dict)


def compute_ate(estimated: dict[int, list[tuple[int, Pose2]]],
                truth: dict[int, list[tuple[int, Pose2]]]) -> AteResult:
    """Absolute trajectory error of one estimate set.

    Args:
        estimated: per robot, (stamp, pose) pairs; stamps must match
            the truth's per robot.
        truth: per robot, (stamp, pose) pairs in one common frame.

    Returns:
        AteResult after one global rigid alignment of the concatenated
        trajectories.

    Raises:
        ValueError: robot sets or stamps disagree, or fewer than 2
        total poses.
    """
    if set(estimated) != set(truth):
        raise ValueError("estimate and truth must cover the same robots")
    est_xy, tru_xy, slices = [], [], {}
    for rid in sorted(estimated):
        e = sorted(estimated[rid])
        t = sorted(truth[rid])
        if [s for s, _ in e] != [s for s, _ in t]:
            raise ValueError(f"stamps differ for robot {rid}")
        start = sum(len(x) for x in est_xy)
        est_xy.append(np.array([[p.x, p.y] for _, p in e]))
        tru_xy.append(np.array([[p.x, p.y] for _, p in t]))
        slices[rid] = (start, start + len(e))
    est_all = np.concatenate(est_xy, axis=0)
    tru_all = np.concatenate(tru_xy, axis=0)
    if est_all.shape[0] < 2:
        raise ValueError("need at least 2 poses")
    align = fit_rigid(est_all, tru_all)
    res = transform_points(align, est_all) - tru_all
    sq = np.einsum("ij,ij->i", res, res)
    per_robot = {rid: float(math.sqrt(np.mean(sq[a:b])))
                 for rid, (a, b) in slices.items()}
    return AteResult(overall=float(math.sqrt(np.mean(sq))),
                     per_robot=per_robot)


@dataclass(frozen=True)
class CandidateRecord:
    """A registration candidate's evaluation row."""

    overlap: float
    true_positive: bool


@dataclass(frozen=True)
class SweepRow:
    """Detection outcome at one overlap acceptance threshold."""

    threshold: float
    detected: int
    true_positives: int
    precision: float


def sweep_overlap(candidates: list[CandidateRecord],
                  thresholds: list[float]) -> list[SweepRow]:
    """Precision/detection curve over overlap acceptance thresholds.

    A candidate is detected at threshold t when its overlap strictly
    exceeds t. With zero detections precision is reported as 1.0
    (vacuously, nothing wrong was accepted).

    Args:
        candidates: converged registration candidates with labels.
        thresholds: thresholds to evaluate, reported in given order.

    Returns:
        One SweepRow per threshold.
    """
    rows = []
    for thr in thresholds:
        det = [c for c in candidates if c.overlap > thr]
        tp = sum(1 for c in det if c.true_positive)
        precision = tp / len(det) if det else 1.0
        rows.append(SweepRow(threshold=float(thr), detected=len(det),
                             true_positives=tp, precision=precision))
    return rows


@dataclass
class MetricsReport:
    """Deterministic end-of-run metrics.

    Wall-clock timings are deliberately excluded; they live in a
    separate runtime report so that repeated runs of the same seed
    produce byte-identical metrics files.
    """

    ate_slam: dict[int, float] = field(default_factory=dict)
    ate_dr: float = 0.0
    candidates: int = 0
    accepted: dict[int, int] = field(default_factory=dict)
    true_positives: int = 0
    precision: float = 1.0
    outliers_injected: int = 0
    outliers_accepted: int = 0
    message_stats: dict[str, tuple[int, float, int]] = field(
        default_factory=dict)
    budget_violations: int = 0
    malformed: int = 0

    def rows(self) -> list[tuple[str, str]]:
        """Flattens the report into ordered (key, value) string rows."""
        out: list[tuple[str, str]] = []
        for rid in sorted(self.ate_slam):
            out.append((f"ate_slam_robot{rid}", repr(self.ate_slam[rid])))
        out.append(("ate_dr", repr(self.ate_dr)))
        out.append(("candidates", str(self.candidates)))
        for rid in sorted(self.accepted):
            out.append((f"accepted_robot{rid}", str(self.accepted[rid])))
        out.append(("true_positives", str(self.true_positives)))
        out.append(("precision", repr(self.precision)))
        out.append(("outliers_injected", str(self.outliers_injected)))
        out.append(("outliers_accepted", str(self.outliers_accepted)))
        for kind in sorted(self.message_stats):
            count, mean, mx = self.message_stats[kind]
            out.append((f"msg_{kind}_count", str(count)))
            out.append((f"msg_{kind}_mean_bits", repr(mean)))
            out.append((f"msg_{kind}_max_bits", str(mx)))
        out.append(("budget_violations", str(self.budget_violations)))
        out.append(("malformed", str(self.malformed)))
        return out
