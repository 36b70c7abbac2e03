"""Independent brute-force oracles the tests compare against.

Everything here is deliberately naive: permutation enumeration, bitmask
subset scans, dense eigensolvers, O(n^2) geometry. The production code
must agree with these on small inputs.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def lap_brute(scores: np.ndarray) -> tuple[float, set[tuple[int, int]]]:
    """Exhaustive linear assignment maximizing the summed score.

    Returns:
        (best objective, one optimal pair set). Rectangular inputs
        assign min(n, m) pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    if n > m:
        best, pairs = lap_brute(scores.T)
        return best, {(i, j) for j, i in pairs}
    best = -math.inf
    best_pairs: set[tuple[int, int]] = set()
    rows = range(n)
    for cols in itertools.permutations(range(m), n):
        pairs = set(zip(rows, cols))
        val = sum(scores[i, j] for i, j in pairs)
        if val > best:
            best = val
            best_pairs = pairs
    return best, best_pairs


def clique_brute(adj: np.ndarray) -> int:
    """Maximum clique size by subset enumeration, n <= 20."""
    adj = np.asarray(adj, dtype=bool)
    n = adj.shape[0]
    best = 0
    masks = [int(sum(1 << j for j in range(n) if adj[i, j])) for i in range(n)]
    for sub in range(1 << n):
        size = sub.bit_count()
        if size <= best:
            continue
        ok = True
        s = sub
        while s:
            i = (s & -s).bit_length() - 1
            s &= s - 1
            if (sub & ~(masks[i] | (1 << i))) != 0:
                ok = False
                break
        if ok:
            best = size
    return best


def dominant_eigvec(mat: np.ndarray) -> np.ndarray:
    """Principal eigenvector of a symmetric matrix via a dense solver.

    Returned with unit norm and a nonnegative orientation (the entry of
    largest magnitude is made positive).
    """
    vals, vecs = np.linalg.eigh(np.asarray(mat, dtype=np.float64))
    v = vecs[:, int(np.argmax(vals))]
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0:
        v = -v
    return v / np.linalg.norm(v)


def dbscan_brute(points: np.ndarray, eps: float,
                 min_pts: int) -> list[set[int]]:
    """Density-connectivity components over the eps-neighborhood graph.

    Core points (|closed neighborhood| >= min_pts) are joined when
    within eps of each other; every cluster is the set of its cores
    plus all non-core points within eps of at least one of them. The
    result is a list of frozen membership sets; border points reachable
    from several clusters appear only in the cluster containing their
    lowest-indexed core neighbor, mirroring the deterministic rule the
    implementation documents.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return []
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    near = d2 <= eps * eps
    degree = near.sum(axis=1)  # closed neighborhood, self included
    core = degree >= min_pts

    # BFS over core-core adjacency
    comp = [-1] * n
    comps: list[list[int]] = []
    for i in range(n):
        if not core[i] or comp[i] != -1:
            continue
        cid = len(comps)
        queue = [i]
        comp[i] = cid
        members = [i]
        while queue:
            u = queue.pop()
            for v in range(n):
                if core[v] and comp[v] == -1 and near[u, v]:
                    comp[v] = cid
                    members.append(v)
                    queue.append(v)
        comps.append(members)

    out = [set(members) for members in comps]
    for i in range(n):
        if core[i]:
            continue
        core_nbrs = [j for j in range(n) if core[j] and near[i, j]]
        if core_nbrs:
            out[comp[min(core_nbrs)]].add(i)
    return [s for s in out if s]


def min_rect_area_brute(points: np.ndarray) -> float:
    """Minimum-area enclosing rectangle area over all pair directions.

    Scans the direction of every point pair (a superset of the hull
    edge directions, so it contains the optimum) plus the axis-aligned
    direction.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    best = math.inf
    dirs = [0.0]
    for i in range(n):
        for j in range(i + 1, n):
            d = pts[j] - pts[i]
            norm = math.hypot(d[0], d[1])
            if norm > 1e-12:
                dirs.append(math.atan2(d[1], d[0]))
    for ang in dirs:
        c, s = math.cos(ang), math.sin(ang)
        u = pts @ np.array([c, s])
        v = pts @ np.array([-s, c])
        area = (u.max() - u.min()) * (v.max() - v.min())
        best = min(best, area)
    return best


def pose_matrix(x: float, y: float, theta: float) -> np.ndarray:
    """Homogeneous 3x3 matrix of an SE(2) pose."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def matrix_chain(*mats: np.ndarray) -> np.ndarray:
    """Left-to-right product of homogeneous matrices."""
    out = np.eye(3)
    for m in mats:
        out = out @ m
    return out


def pose_of_matrix(mat: np.ndarray) -> tuple[float, float, float]:
    """(x, y, theta) of a homogeneous SE(2) matrix."""
    return (float(mat[0, 2]), float(mat[1, 2]),
            math.atan2(mat[1, 0], mat[0, 0]))


def overlap_brute(source: np.ndarray, target: np.ndarray,
                  dist: float) -> float:
    """Fraction of target points with a source point within dist."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if len(tgt) == 0:
        raise ValueError("empty target")
    if len(src) == 0:
        return 0.0
    d2 = np.sum((tgt[:, None, :] - src[None, :, :]) ** 2, axis=2)
    return float(np.count_nonzero(d2.min(axis=1) <= dist * dist)) / len(tgt)


def nn_brute(src: np.ndarray, tgt: np.ndarray,
             max_dist: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest target index within max_dist per source point, O(nm).

    Ties on exact distance go to the lower index.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 2)
    idx = np.full(len(src), -1, dtype=np.int64)
    dist = np.full(len(src), np.inf)
    for i in range(len(src)):
        d = np.hypot(tgt[:, 0] - src[i, 0], tgt[:, 1] - src[i, 1])
        j = int(np.argmin(d)) if len(d) else -1
        if j >= 0 and d[j] <= max_dist:
            idx[i] = j
            dist[i] = d[j]
    return idx, dist


def numeric_jacobian(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of fn at x."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(fn(x), dtype=np.float64)
    jac = np.zeros((f0.size, x.size))
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = eps
        fp = np.asarray(fn(x + step), dtype=np.float64)
        fm = np.asarray(fn(x - step), dtype=np.float64)
        jac[:, k] = (fp - fm) / (2.0 * eps)
    return jac
