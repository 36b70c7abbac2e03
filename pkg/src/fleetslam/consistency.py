"""Inter-robot loop closure consistency checking.

A loop closure measures the pose of a neighbor robot's keyframe in one
of the local robot's keyframe frames. Closures are vetted in groups: two
closures are mutually consistent when the relative-pose chain that walks
closure 1 forward, along the neighbor trajectory, back through closure
2, and along the local trajectory returns close to the identity. For
closures involving two different neighbors the chain crosses between
the neighbors' map frames using map-to-map transforms recovered from
previously accepted closures, which lets closures from different robot
pairs check each other. The largest mutually consistent group (maximum
clique of the consistency graph) is accepted.

Two modes exist: "pcm" partitions closures by neighbor robot and vets
each pair's closures independently, "gcm" keeps a single graph with
cross-neighbor edges whenever map transforms are available.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import chi2

from fleetslam.geometry import (Pose2, between, check_covariance, compose,
                                inverse, pose_norm)

Scorer = Callable[["LoopClosure", "LoopClosure"], float | None]


class MapTransformUnavailable(Exception):
    """A group-wise score needs a map transform that does not exist yet.

    Callers fall back to treating the closure pair as unscorable (no
    edge), which degrades gracefully to pairwise-only behavior.
    """


@dataclass(frozen=True)
class LoopClosure:
    """An inter-robot loop closure measurement.

    Attributes:
        local_robot: robot that owns the measurement.
        local_kf: local keyframe index.
        neighbor_robot: the other robot, different from local_robot.
        neighbor_kf: neighbor keyframe index.
        measurement: pose of the neighbor keyframe expressed in the
            local keyframe's frame.
        covariance: 3x3 measurement covariance.
        overlap: point cloud overlap ratio that the registration
            achieved, in [0, 1].
        stamp: timestep the closure was created.
    """

    local_robot: int
    local_kf: int
    neighbor_robot: int
    neighbor_kf: int
    measurement: Pose2
    covariance: np.ndarray
    overlap: float = 0.0
    stamp: int = 0

    def __post_init__(self):
        if self.local_robot == self.neighbor_robot:
            raise ValueError("loop closures are inter-robot")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        object.__setattr__(self, "covariance",
                           check_covariance(self.covariance))

    def key(self) -> tuple[int, int, int, int]:
        return (self.local_robot, self.local_kf,
                self.neighbor_robot, self.neighbor_kf)


@dataclass
class ConsistencyParams:
    """Consistency graph thresholds.

    Attributes:
        threshold: unweighted mode accepts an edge when the chain norm
            is below this, meters-equivalent.
        angle_scale: weight on squared heading error in the unweighted
            chain norm.
        weighted: use the Mahalanobis chain norm under the summed
            closure covariances instead of the unweighted norm.
        weighted_quantile: chi-square quantile (3 dof) defining the
            weighted-mode threshold.
        mode: "gcm" (single graph, cross-neighbor edges) or "pcm"
            (per-neighbor partitions).
        max_nodes: closure queue bound; oldest closures are evicted
            beyond this so the exact clique search stays tractable.
    """

    threshold: float = 0.6
    angle_scale: float = 1.0
    weighted: bool = False
    weighted_quantile: float = 0.95
    mode: str = "gcm"
    max_nodes: int = 60

    def edge_threshold(self) -> float:
        if self.weighted:
            return math.sqrt(chi2.ppf(self.weighted_quantile, df=3))
        return self.threshold


def _chain_norm(chain: Pose2, z1: LoopClosure, z2: LoopClosure,
                params: ConsistencyParams | None) -> float:
    if params is not None and params.weighted:
        return pose_norm(chain, weight=z1.covariance + z2.covariance)
    scale = params.angle_scale if params is not None else 1.0
    return pose_norm(chain, angle_scale=scale)


def pcm_score(z1: LoopClosure, z2: LoopClosure, rel_neighbor: Pose2,
              rel_local: Pose2,
              params: ConsistencyParams | None = None) -> float:
    """Pairwise consistency of two closures to the same neighbor.

    Walks the loop: through z1 onto the neighbor trajectory, along it
    by rel_neighbor, back through z2, and along the local trajectory by
    rel_local. For error-free inputs the chain is the identity.

    Args:
        z1: first closure.
        z2: second closure, same robot pair as z1.
        rel_neighbor: pose of z2's neighbor keyframe expressed in z1's
            neighbor keyframe frame.
        rel_local: pose of z1's local keyframe expressed in z2's local
            keyframe frame.
        params: norm configuration; None means the unweighted norm.

    Returns:
        Nonnegative chain norm, near zero for mutually consistent pairs.

    Raises:
        ValueError: closures do not share the same robot pair.
    """
    if (z1.local_robot != z2.local_robot
            or z1.neighbor_robot != z2.neighbor_robot):
        raise ValueError("pairwise score needs closures of one robot pair")
    chain = compose(compose(z1.measurement, rel_neighbor),
                    compose(inverse(z2.measurement), rel_local))
    return _chain_norm(chain, z1, z2, params)


def gcm_score(z1: LoopClosure, z2: LoopClosure, nbr1_pose: Pose2,
              nbr2_pose: Pose2, rel_local: Pose2,
              map_tf1: Pose2 | None, map_tf2: Pose2 | None,
              params: ConsistencyParams | None = None) -> float:
    """Group-wise consistency of closures to two different neighbors.

    The chain of pcm_score is generalized by replacing the
    along-neighbor hop with a cross-neighbor hop assembled from each
    neighbor's own trajectory estimate and the local robot's map
    transforms to both neighbors. With identical neighbors and exact
    transforms it reduces to pcm_score.

    Args:
        z1: closure to the first neighbor.
        z2: closure to the second neighbor, same local robot.
        nbr1_pose: z1's neighbor keyframe pose in that neighbor's own
            map frame.
        nbr2_pose: z2's neighbor keyframe pose in that neighbor's own
            map frame.
        rel_local: pose of z1's local keyframe expressed in z2's local
            keyframe frame.
        map_tf1: local map origin expressed in neighbor 1's map frame.
        map_tf2: local map origin expressed in neighbor 2's map frame.
        params: norm configuration; None means the unweighted norm.

    Returns:
        Nonnegative chain norm.

    Raises:
        MapTransformUnavailable: either map transform is None.
        ValueError: closures have different local robots.
    """
    if z1.local_robot != z2.local_robot:
        raise ValueError("group-wise score needs a common local robot")
    if map_tf1 is None or map_tf2 is None:
        raise MapTransformUnavailable(
            "map transform missing, fall back to pairwise checking")
    cross = compose(compose(inverse(nbr1_pose), map_tf1),
                    compose(inverse(map_tf2), nbr2_pose))
    chain = compose(compose(z1.measurement, cross),
                    compose(inverse(z2.measurement), rel_local))
    return _chain_norm(chain, z1, z2, params)


def make_scorer(local_poses: dict[int, Pose2],
                neighbor_poses: dict[int, dict[int, Pose2]],
                placements: dict[int, Pose2],
                params: ConsistencyParams) -> Scorer:
    """Builds a closure-pair scorer bound to a robot's current state.

    Args:
        local_poses: the robot's own keyframe pose estimates.
        neighbor_poses: per neighbor, that robot's relayed keyframe
            poses in its own map frame.
        placements: per neighbor, the neighbor's map origin expressed
            in the local map frame (inverted internally for gcm_score).
        params: mode and norm configuration.

    Returns:
        scorer(z1, z2) -> float | None; None marks unscorable pairs
        (missing poses, missing map transforms, or cross-neighbor pairs
        in pcm mode).
    """

    def scorer(z1: LoopClosure, z2: LoopClosure) -> float | None:
        la = local_poses.get(z1.local_kf)
        lb = local_poses.get(z2.local_kf)
        na = neighbor_poses.get(z1.neighbor_robot, {}).get(z1.neighbor_kf)
        nb = neighbor_poses.get(z2.neighbor_robot, {}).get(z2.neighbor_kf)
        if la is None or lb is None or na is None or nb is None:
            return None
        rel_local = between(lb, la)
        if z1.neighbor_robot == z2.neighbor_robot:
            return pcm_score(z1, z2, between(na, nb), rel_local, params)
        if params.mode != "gcm":
            return None
        p1 = placements.get(z1.neighbor_robot)
        p2 = placements.get(z2.neighbor_robot)
        try:
            return gcm_score(z1, z2, na, nb, rel_local,
                             None if p1 is None else inverse(p1),
                             None if p2 is None else inverse(p2), params)
        except MapTransformUnavailable:
            return None

    return scorer


@dataclass
class ConsistencyGraph:
    """Incrementally maintained consistency graph over queued closures.

    Pair scores are computed once, when the later closure of the pair
    arrives, and frozen; an edge joins two closures when their
    symmetrized score stays below the threshold. Unscorable pairs have
    score nan and no edge.
    """

    params: ConsistencyParams = field(default_factory=ConsistencyParams)
    closures: list[LoopClosure] = field(default_factory=list)
    scores: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 0)))
    adjacency: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 0), dtype=bool))

    def update(self, closure: LoopClosure, scorer: Scorer) -> int:
        """Adds a closure, scoring it against the queued ones.

        The score of a pair is max(score(i, j), score(j, i)) over the
        directions the scorer could evaluate; taking the worse direction
        makes the edge test direction-independent.

        Returns:
            Index of the new closure in the queue.
        """
        n = len(self.closures)
        self.closures.append(closure)
        scores = np.full((n + 1, n + 1), np.nan)
        scores[:n, :n] = self.scores
        adj = np.zeros((n + 1, n + 1), dtype=bool)
        adj[:n, :n] = self.adjacency
        thr = self.params.edge_threshold()
        for j in range(n):
            vals = [v for v in (scorer(closure, self.closures[j]),
                                scorer(self.closures[j], closure))
                    if v is not None]
            if vals:
                s = max(vals)
                scores[n, j] = scores[j, n] = s
                adj[n, j] = adj[j, n] = s < thr
        self.scores = scores
        self.adjacency = adj
        return n

    def max_clique(self, seed: list[int] | None = None) -> list[int]:
        """Largest mutually consistent closure set.

        Exact branch-and-bound search. Ties on size prefer the clique
        with larger summed overlap, then the lexicographically smallest
        member list. A previous clique can seed the incumbent bound.

        Returns:
            Sorted closure indices of the maximum clique; empty only
            when the graph is empty.
        """
        weights = np.array([z.overlap for z in self.closures])
        return max_clique(self.adjacency, tie_weight=weights, seed=seed)


def max_clique(adjacency: np.ndarray, tie_weight: np.ndarray | None = None,
               seed: list[int] | None = None) -> list[int]:
    """Exact maximum clique of an undirected graph.

    Branch and bound over bitset candidate sets with greedy pivoting.
    Exponential worst case, intended for the bounded closure queues
    this package maintains (tens of nodes).

    Args:
        adjacency: (n, n) symmetric boolean matrix, diagonal ignored.
        tie_weight: per-node weights; among maximum cliques the larger
            weight sum wins, then the lexicographically smallest member
            list.
        seed: optional known clique used as the initial incumbent.

    Returns:
        Sorted member indices of the chosen maximum clique.
    """
    adj = np.asarray(adjacency, dtype=bool)
    n = adj.shape[0]
    if n == 0:
        return []
    if tie_weight is None:
        tie_weight = np.zeros(n)
    nbr = []
    for i in range(n):
        bits = 0
        for j in np.nonzero(adj[i])[0]:
            if j != i:
                bits |= 1 << int(j)
        nbr.append(bits)

    def key_of(members: list[int]):
        members = sorted(members)
        return (len(members), float(tie_weight[members].sum()),
                tuple(-m for m in members))

    best: list[int] = []
    best_key = (0, -math.inf, ())
    if seed and all(0 <= v < n for v in seed):
        ok = all(adj[a, b] for i, a in enumerate(seed)
                 for b in seed[i + 1:])
        if ok:
            best = sorted(seed)
            best_key = key_of(best)

    def consider(members: list[int]):
        nonlocal best, best_key
        k = key_of(members)
        if k > best_key:
            best_key = k
            best = sorted(members)

    def expand(cand: int, members: list[int]):
        if cand == 0:
            consider(members)
            return
        if len(members) + cand.bit_count() < best_key[0]:
            return
        # pivot on the candidate covering most of the candidate set
        pivot = -1
        pivot_cover = -1
        scan = cand
        while scan:
            lsb = scan & -scan
            u = lsb.bit_length() - 1
            cover = (cand & nbr[u]).bit_count()
            if cover > pivot_cover:
                pivot_cover = cover
                pivot = u
            scan ^= lsb
        ext = cand & ~nbr[pivot]
        while ext:
            lsb = ext & -ext
            v = lsb.bit_length() - 1
            members.append(v)
            expand(cand & nbr[v], members)
            members.pop()
            cand ^= lsb
            ext ^= lsb
            if len(members) + cand.bit_count() < best_key[0]:
                return

    expand((1 << n) - 1, [])
    return best


def select_consistent(closures: list[LoopClosure], scorer: Scorer,
                      params: ConsistencyParams) -> list[int]:
    """Batch consistency selection over a closure list.

    In "gcm" mode a single graph is built and its maximum clique
    returned. In "pcm" mode closures are partitioned by neighbor robot,
    each partition vetted independently, and the per-partition cliques
    united; a closure pair that only ever sees its own partition cannot
    be contradicted by other pairs' closures.

    Args:
        closures: queued closures of one local robot.
        scorer: pair scorer, e.g. from make_scorer.
        params: mode and thresholds.

    Returns:
        Sorted indices into closures of the accepted subset.
    """
    if not closures:
        return []
    if params.mode == "pcm":
        accepted: list[int] = []
        for nbr in sorted({z.neighbor_robot for z in closures}):
            idxs = [i for i, z in enumerate(closures)
                    if z.neighbor_robot == nbr]
            graph = ConsistencyGraph(params=params)
            for i in idxs:
                graph.update(closures[i], scorer)
            accepted.extend(idxs[j] for j in graph.max_clique())
        return sorted(accepted)
    graph = ConsistencyGraph(params=params)
    for z in closures:
        graph.update(z, scorer)
    return graph.max_clique()


def dump_consistency_csv(graph: ConsistencyGraph, path,
                         accepted: list[int] | None = None) -> None:
    """Writes pair scores and the accepted set as CSV."""
    accepted = set(accepted or [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "score", "edge"])
        n = len(graph.closures)
        for i in range(n):
            for j in range(i + 1, n):
                s = graph.scores[i, j]
                writer.writerow([i, j, "" if np.isnan(s) else repr(float(s)),
                                 int(graph.adjacency[i, j])])
        writer.writerow(["accepted", " ".join(str(i) for i in sorted(accepted)),
                         "", ""])
