"""Distributed multi-robot sonar SLAM playground.

Each robot builds a local pose graph from odometry and sequential scan
matching, summarizes its sonar map as oriented boxes around clustered
returns, exchanges those summaries over a budgeted broadcast channel,
matches them spectrally against neighbors' summaries, verifies the
promising keyframes with windowed ICP, vets the resulting inter-robot
closures by pairwise consistency and maximum clique, and fuses
everything with a robust two-step pose graph optimization.

Hot numeric kernels run under numba when available; set
FLEETSLAM_BACKEND=numpy to force the pure numpy path.
"""

from fleetslam.geometry import (Pose2, between, compose, inverse,
                                transform_points, wrap_angle)

__all__ = [
    "Pose2",
    "between",
    "compose",
    "inverse",
    "transform_points",
    "wrap_angle",
    "__version__",
]

__version__ = "0.1.0"
