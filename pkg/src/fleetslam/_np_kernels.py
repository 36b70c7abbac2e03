"""Pure-numpy/scipy spatial search kernels.

Fallback implementations of the backend kernel contract, built on
scipy.spatial.cKDTree. Results match the compiled kernels except that
exact distance ties in nearest-neighbor queries may resolve to a
different (still valid) index, because the kd-tree visit order is not
index order.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def nn_within(src, tgt, max_dist):
    """Nearest target point within max_dist for every source point.

    Args:
        src: (n, 2) query points.
        tgt: (m, 2) reference points, m >= 1.
        max_dist: inclusive distance cap.

    Returns:
        (idx, dist): int64 / float64 arrays; idx[i] = -1 and
        dist[i] = inf when no reference point lies within max_dist.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    tgt = np.ascontiguousarray(tgt, dtype=np.float64)
    tree = cKDTree(tgt)
    dist, idx = tree.query(src, k=1, distance_upper_bound=np.nextafter(
        max_dist, np.inf))
    idx = idx.astype(np.int64)
    miss = ~(dist <= max_dist)
    idx[miss] = -1
    dist = np.where(miss, np.inf, dist)
    return idx, dist


def radius_csr(xy, eps):
    """All neighbors within eps of every point, CSR layout.

    Args:
        xy: (n, 2) points.
        eps: inclusive neighborhood radius.

    Returns:
        (indptr, indices) with each row's neighbor indices ascending and
        the point itself excluded.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    n = xy.shape[0]
    tree = cKDTree(xy)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    if pairs.size == 0:
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    # symmetrize: each unordered pair contributes both directions
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((cols, rows))
    rows = rows[order]
    cols = cols[order]
    counts = np.bincount(rows, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, cols.astype(np.int64)
