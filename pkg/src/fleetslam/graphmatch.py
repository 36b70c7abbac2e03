"""Inter-robot object graph matching.

Two robots' object maps are matched by treating each map as a complete
graph over object centers and scoring how well pairwise center
distances and rectangle dimensions agree. The pairwise-consistency
scores form a utility matrix over correspondence candidates; its
dominant eigenvector (a relaxed quadratic-assignment solution) is
rounded to a one-to-one assignment with a linear assignment solve, and
the surviving correspondences vote on a rigid map-to-map transform
through RANSAC.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from fleetslam.geometry import Pose2, fit_rigid, fit_similarity, \
    transform_points
from fleetslam.objectmap import ObjectBox, ObjectMap


@dataclass
class MatchParams:
    """Graph matching and transform estimation knobs.

    Attributes:
        mu: weight of the pairwise-distance term against the dimension
            terms in the edge utility exponent.
        min_pair_score_frac: pairs scoring below this fraction of the
            best pair's eigenvector score are dropped.
        max_pairs: cap on candidate correspondences (n_local * n_nbr).
        spectral_tol: power iteration stopping tolerance.
        spectral_max_iter: power iteration cap.
        ransac_iters: cap on sampled minimal subsets.
        inlier_dist: center distance for a correspondence to count as a
            transform inlier, meters.
        min_pairs: fewest correspondences worth attempting a transform.
        min_inliers: fewest inliers for a transform to be accepted.
        allow_scale: estimate a similarity (with uniform scale) instead
            of a rigid transform.
    """

    mu: float = 4.0
    min_pair_score_frac: float = 0.1
    max_pairs: int = 2500
    spectral_tol: float = 1e-10
    spectral_max_iter: int = 1000
    ransac_iters: int = 200
    inlier_dist: float = 1.0
    min_pairs: int = 4
    min_inliers: int = 5
    allow_scale: bool = False


@dataclass
class ObjectGraph:
    """Complete graph over one object map.

    Attributes:
        boxes: the map's objects, index-aligned with the weight matrix.
        weights: (n, n) symmetric matrix of center-to-center distances,
            zero diagonal.
    """

    boxes: list[ObjectBox]
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def centers(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 2))
        return np.stack([b.center for b in self.boxes])

    @property
    def lengths(self) -> np.ndarray:
        return np.array([b.length for b in self.boxes])

    @property
    def breadths(self) -> np.ndarray:
        return np.array([b.breadth for b in self.boxes])


@dataclass
class Matching:
    """Result of matching a neighbor's object graph to the local one.

    Attributes:
        pairs: (local_id, neighbor_id) correspondences.
        scores: eigenvector score per pair, in [0, 1].
        transform: neighbor-map to local-map transform when RANSAC
            succeeded, else None.
        inlier_count: transform inliers (0 when transform is None).
        inlier_pairs: indices into pairs of the inlier correspondences.
        scale: estimated uniform scale (1.0 in rigid mode).
    """

    pairs: list[tuple[int, int]] = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    transform: Pose2 | None = None
    inlier_count: int = 0
    inlier_pairs: list[int] = field(default_factory=list)
    scale: float = 1.0


def build_graph(object_map: ObjectMap) -> ObjectGraph:
    """Builds the complete distance-weighted graph of an object map."""
    centers = object_map.centers()
    d = centers[:, None, :] - centers[None, :, :]
    weights = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return ObjectGraph(boxes=list(object_map.objects), weights=weights)


def edge_utility(e_local: tuple[float, float, float],
                 e_neighbor: tuple[float, float, float],
                 mu: float = 4.0) -> float:
    """Utility of pairing one directed edge from each graph.

    Each edge is summarized as (w, l, b): its length w and the bounding
    rectangle dimensions of its source vertex. The utility is
    exp(-mu*|w - w'| - |l - l'| - |b - b'|), in (0, 1], equal to 1 only
    for identical summaries.
    """
    w1, l1, b1 = e_local
    w2, l2, b2 = e_neighbor
    return math.exp(-mu * abs(w1 - w2) - abs(l1 - l2) - abs(b1 - b2))


def build_utility_matrix(g_local: ObjectGraph, g_neighbor: ObjectGraph,
                         params: MatchParams | None = None) -> np.ndarray:
    """Assembles the correspondence utility matrix.

    Candidate correspondence p = (i, k) pairs local object i with
    neighbor object k and maps to row/column index i * n_neighbor + k.
    The entry for rows p = (i, k) and q = (j, l) averages the utilities
    of the directed edge pairs (e_ij, e_kl) and (e_ji, e_lk); averaging
    the two orders keeps the matrix symmetric without changing the
    total assignment score, since any assignment containing p and q
    contains both orders. Degenerate combinations that reuse a vertex
    on one side only (i == j xor k == l) get zero; the diagonal reduces
    to the vertex-to-vertex dimension affinity.

    Args:
        g_local: local object graph, nonempty.
        g_neighbor: neighbor object graph, nonempty.
        params: provides mu and the max_pairs cap.

    Returns:
        (na*nb, na*nb) symmetric nonnegative matrix.

    Raises:
        ValueError: empty graph or na*nb exceeds params.max_pairs.
    """
    params = params or MatchParams()
    na, nb = len(g_local), len(g_neighbor)
    if na == 0 or nb == 0:
        raise ValueError("graphs must be nonempty")
    if na * nb > params.max_pairs:
        raise ValueError(
            f"{na * nb} candidate pairs exceed cap {params.max_pairs}")
    wa, wb = g_local.weights, g_neighbor.weights
    w_term = np.abs(wa[:, None, :, None] - wb[None, :, None, :])
    dl = np.abs(g_local.lengths[:, None] - g_neighbor.lengths[None, :])
    db = np.abs(g_local.breadths[:, None] - g_neighbor.breadths[None, :])
    row_dims = (dl + db).reshape(-1)
    u = np.exp(-params.mu * w_term).reshape(na * nb, na * nb) \
        * np.exp(-row_dims)[:, None]
    same_a = np.eye(na, dtype=bool)
    same_b = np.eye(nb, dtype=bool)
    degen = (same_a[:, None, :, None] ^ same_b[None, :, None, :])
    u[degen.reshape(na * nb, na * nb)] = 0.0
    return (u + u.T) / 2.0


def spectral_solve(utility: np.ndarray, tol: float = 1e-10,
                   max_iter: int = 1000) -> np.ndarray:
    """Dominant eigenvector of a symmetric nonnegative utility matrix.

    Power iteration from a uniform positive start; for a nonnegative
    matrix this converges to a nonnegative principal eigenvector, whose
    entries rank how strongly each correspondence participates in the
    best mutually consistent set.

    Args:
        utility: (n, n) symmetric matrix with nonnegative entries, not
            all zero.
        tol: stop when successive iterates differ by less than this in
            the 2-norm.
        max_iter: iteration cap.

    Returns:
        Unit 2-norm nonnegative vector of length n.

    Raises:
        ValueError: asymmetric, negative, or all-zero utility matrix.
    """
    u = np.asarray(utility, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ValueError("utility matrix must be square")
    if np.any(u < 0):
        raise ValueError("utility matrix must be nonnegative")
    if not np.allclose(u, u.T, atol=1e-12):
        raise ValueError("utility matrix must be symmetric")
    if not np.any(u > 0):
        raise ValueError("utility matrix is zero")
    v = np.full(u.shape[0], 1.0 / math.sqrt(u.shape[0]))
    for _ in range(max_iter):
        w = u @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise ValueError("power iteration collapsed to zero")
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    v = np.maximum(v, 0.0)
    return v / np.linalg.norm(v)


def solve_lap(scores: np.ndarray, maximize: bool = True):
    """One-to-one assignment maximizing (or minimizing) total score.

    Thin wrapper over the modified Jonker-Volgenant solver in scipy,
    which handles rectangular inputs by assigning min(n, m) pairs.

    Args:
        scores: (n, m) finite score matrix.
        maximize: maximize total score when true.

    Returns:
        (rows, cols) index arrays, rows ascending.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return linear_sum_assignment(s, maximize=maximize)


def match_graphs(g_local: ObjectGraph, g_neighbor: ObjectGraph,
                 params: MatchParams | None = None) -> Matching:
    """Matches two object graphs.

    Pipeline: utility matrix over candidate correspondences, dominant
    eigenvector, reshape to an (n_local, n_neighbor) score table, LAP
    rounding, then a relative-score filter that keeps pairs scoring at
    least min_pair_score_frac of the best kept pair.

    Args:
        g_local: receiving robot's graph, at least 2 vertices.
        g_neighbor: sending robot's graph, at least 2 vertices.
        params: matching knobs, defaults used when None.

    Returns:
        Matching with pairs and scores; transform left unset.

    Raises:
        ValueError: either graph has fewer than 2 vertices.
    """
    params = params or MatchParams()
    na, nb = len(g_local), len(g_neighbor)
    if na < 2 or nb < 2:
        raise ValueError("graph matching needs at least 2 objects per map")
    u = build_utility_matrix(g_local, g_neighbor, params)
    v = spectral_solve(u, tol=params.spectral_tol,
                       max_iter=params.spectral_max_iter)
    table = v.reshape(na, nb)
    rows, cols = solve_lap(table, maximize=True)
    scores = table[rows, cols]
    if scores.size == 0 or scores.max() <= 0.0:
        return Matching()
    keep = scores >= params.min_pair_score_frac * scores.max()
    pairs = [(int(i), int(k)) for i, k in zip(rows[keep], cols[keep])]
    return Matching(pairs=pairs, scores=scores[keep])


def estimate_transform(matching: Matching, g_local: ObjectGraph,
                       g_neighbor: ObjectGraph,
                       params: MatchParams | None = None,
                       rng: np.random.Generator | None = None) -> Pose2 | None:
    """RANSAC rigid transform from matched object centers.

    Minimal samples are 2 correspondences; the hypothesis maps neighbor
    centers into the local map and counts correspondences landing
    within inlier_dist of their local center. The best hypothesis is
    refit on its inliers. On success matching.transform, inlier_count,
    inlier_pairs and scale are filled in.

    Args:
        matching: output of match_graphs; mutated on success.
        g_local: local graph the pairs index into.
        g_neighbor: neighbor graph the pairs index into.
        params: matching knobs, defaults used when None.
        rng: sampling source when the minimal-subset space exceeds
            ransac_iters; a fixed default keeps results reproducible.

    Returns:
        The neighbor-to-local map transform, or None when there are too
        few pairs or no hypothesis reaches min_inliers.
    """
    params = params or MatchParams()
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(matching.pairs)
    if n < params.min_pairs:
        return None
    local_ids = [i for i, _ in matching.pairs]
    nbr_ids = [k for _, k in matching.pairs]
    dst = g_local.centers[local_ids]
    src = g_neighbor.centers[nbr_ids]

    n_comb = n * (n - 1) // 2
    if n_comb <= params.ransac_iters:
        samples = itertools.combinations(range(n), 2)
    else:
        samples = (tuple(rng.choice(n, size=2, replace=False))
                   for _ in range(params.ransac_iters))

    best_mask = None
    best_key = (0, -math.inf)
    for a, b in samples:
        if np.linalg.norm(src[a] - src[b]) < 1e-9:
            continue
        pose, scale = _fit_pairs(src[[a, b]], dst[[a, b]], params.allow_scale)
        res = np.linalg.norm(
            scale * transform_points(pose, src) - dst, axis=1)
        mask = res <= params.inlier_dist
        count = int(mask.sum())
        if count < 2:
            continue
        key = (count, -float(np.sqrt(np.mean(res[mask] ** 2))))
        if key > best_key:
            best_key = key
            best_mask = mask
    if best_mask is None or best_key[0] < params.min_inliers:
        return None

    pose, scale = _fit_pairs(src[best_mask], dst[best_mask],
                             params.allow_scale)
    res = np.linalg.norm(scale * transform_points(pose, src) - dst, axis=1)
    mask = res <= params.inlier_dist
    if int(mask.sum()) < params.min_inliers:
        return None
    matching.transform = pose
    matching.scale = scale
    matching.inlier_count = int(mask.sum())
    matching.inlier_pairs = [int(i) for i in np.nonzero(mask)[0]]
    return pose


def _fit_pairs(src, dst, allow_scale: bool) -> tuple[Pose2, float]:
    if allow_scale:
        return fit_similarity(src, dst)
    return fit_rigid(src, dst), 1.0


def dump_matching(matching: Matching, path) -> None:
    """Writes a matching as JSON for offline inspection."""
    doc = {
        "pairs": [[int(i), int(k)] for i, k in matching.pairs],
        "scores": [float(s) for s in matching.scores],
        "transform": (None if matching.transform is None else
                      [matching.transform.x, matching.transform.y,
                       matching.transform.theta]),
        "inlier_count": matching.inlier_count,
        "inlier_pairs": matching.inlier_pairs,
        "scale": matching.scale,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
