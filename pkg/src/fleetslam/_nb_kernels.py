"""Numba-compiled spatial search kernels.

These are the hot inner loops of scan registration and density
clustering: nearest-neighbor queries with a distance cap, and
fixed-radius neighborhood queries returned in CSR form. Both use a
uniform grid hash sized to the query radius so each point only scans
the 3x3 block of cells around it. Points far outside the reference
extent fall back to the clamped border cells, which is correct because
any true neighbor within the radius lies at most one cell away.

Ties on distance resolve to the lowest point index in both kernels so
results are reproducible bit-for-bit across runs.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _grid_build(xy, cell, minx, miny, nx, ny):
    """Bins points into a uniform grid, CSR layout.

    Args:
        xy: (n, 2) float64 point array.
        cell: grid cell edge length.
        minx: grid origin x.
        miny: grid origin y.
        nx: number of cells along x.
        ny: number of cells along y.

    Returns:
        (indptr, order): indptr has nx*ny+1 entries; order[indptr[c]:
        indptr[c+1]] lists the point indices in cell c, ascending.
    """
    n = xy.shape[0]
    ncells = nx * ny
    counts = np.zeros(ncells + 1, dtype=np.int64)
    cids = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx = int(np.floor((xy[i, 0] - minx) / cell))
        cy = int(np.floor((xy[i, 1] - miny) / cell))
        if cx < 0:
            cx = 0
        elif cx >= nx:
            cx = nx - 1
        if cy < 0:
            cy = 0
        elif cy >= ny:
            cy = ny - 1
        cid = cx * ny + cy
        cids[i] = cid
        counts[cid + 1] += 1
    indptr = np.cumsum(counts)
    order = np.empty(n, dtype=np.int64)
    fill = indptr[:-1].copy()
    # ascending i keeps each cell's point list sorted by index
    for i in range(n):
        order[fill[cids[i]]] = i
        fill[cids[i]] += 1
    return indptr, order


@njit(cache=True)
def nn_within_grid(src, tgt, max_dist):
    """Nearest target point within max_dist for every source point.

    Args:
        src: (n, 2) query points.
        tgt: (m, 2) reference points, m >= 1.
        max_dist: inclusive distance cap.

    Returns:
        (idx, dist): int64 and float64 arrays of length n. idx[i] is the
        index of the nearest reference point with distance <= max_dist,
        or -1 (dist inf) if none. Equidistant candidates resolve to the
        lowest index.
    """
    m = tgt.shape[0]
    cell = max_dist
    minx = tgt[0, 0]
    miny = tgt[0, 1]
    maxx = minx
    maxy = miny
    for j in range(m):
        if tgt[j, 0] < minx:
            minx = tgt[j, 0]
        if tgt[j, 0] > maxx:
            maxx = tgt[j, 0]
        if tgt[j, 1] < miny:
            miny = tgt[j, 1]
        if tgt[j, 1] > maxy:
            maxy = tgt[j, 1]
    nx = int(np.floor((maxx - minx) / cell)) + 1
    ny = int(np.floor((maxy - miny) / cell)) + 1
    indptr, order = _grid_build(tgt, cell, minx, miny, nx, ny)

    n = src.shape[0]
    idx = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.inf, dtype=np.float64)
    cap2 = max_dist * max_dist
    for i in range(n):
        cx = int(np.floor((src[i, 0] - minx) / cell))
        cy = int(np.floor((src[i, 1] - miny) / cell))
        x0 = cx - 1 if cx - 1 > 0 else 0
        x1 = cx + 1 if cx + 1 < nx - 1 else nx - 1
        y0 = cy - 1 if cy - 1 > 0 else 0
        y1 = cy + 1 if cy + 1 < ny - 1 else ny - 1
        best = np.inf
        best_j = -1
        for gx in range(x0, x1 + 1):
            for gy in range(y0, y1 + 1):
                cid = gx * ny + gy
                for k in range(indptr[cid], indptr[cid + 1]):
                    j = order[k]
                    dx = src[i, 0] - tgt[j, 0]
                    dy = src[i, 1] - tgt[j, 1]
                    d2 = dx * dx + dy * dy
                    if d2 < best or (d2 == best and j < best_j):
                        best = d2
                        best_j = j
        if best_j >= 0 and best <= cap2:
            idx[i] = best_j
            dist[i] = np.sqrt(best)
    return idx, dist


@njit(cache=True)
def nn_within_brute(src, tgt, max_dist):
    """Brute-force variant of nn_within_grid, O(n*m).

    Used when the reference extent would make the grid degenerate.
    Same contract and tie-break as the grid kernel.
    """
    n = src.shape[0]
    m = tgt.shape[0]
    idx = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.inf, dtype=np.float64)
    cap2 = max_dist * max_dist
    for i in range(n):
        best = np.inf
        best_j = -1
        for j in range(m):
            dx = src[i, 0] - tgt[j, 0]
            dy = src[i, 1] - tgt[j, 1]
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
                best_j = j
        if best_j >= 0 and best <= cap2:
            idx[i] = best_j
            dist[i] = np.sqrt(best)
    return idx, dist


@njit(cache=True)
def radius_csr_grid(xy, eps):
    """All neighbors within eps of every point, CSR layout.

    Args:
        xy: (n, 2) float64 points.
        eps: inclusive neighborhood radius.

    Returns:
        (indptr, indices): indices[indptr[i]:indptr[i+1]] lists the
        points j != i with ||xy[j] - xy[i]|| <= eps, ascending.
    """
    n = xy.shape[0]
    cell = eps
    minx = xy[0, 0]
    miny = xy[0, 1]
    maxx = minx
    maxy = miny
    for j in range(n):
        if xy[j, 0] < minx:
            minx = xy[j, 0]
        if xy[j, 0] > maxx:
            maxx = xy[j, 0]
        if xy[j, 1] < miny:
            miny = xy[j, 1]
        if xy[j, 1] > maxy:
            maxy = xy[j, 1]
    nx = int(np.floor((maxx - minx) / cell)) + 1
    ny = int(np.floor((maxy - miny) / cell)) + 1
    indptr_g, order = _grid_build(xy, cell, minx, miny, nx, ny)

    eps2 = eps * eps
    counts = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        cx = int(np.floor((xy[i, 0] - minx) / cell))
        cy = int(np.floor((xy[i, 1] - miny) / cell))
        x0 = cx - 1 if cx - 1 > 0 else 0
        x1 = cx + 1 if cx + 1 < nx - 1 else nx - 1
        y0 = cy - 1 if cy - 1 > 0 else 0
        y1 = cy + 1 if cy + 1 < ny - 1 else ny - 1
        c = 0
        for gx in range(x0, x1 + 1):
            for gy in range(y0, y1 + 1):
                cid = gx * ny + gy
                for k in range(indptr_g[cid], indptr_g[cid + 1]):
                    j = order[k]
                    if j == i:
                        continue
                    dx = xy[i, 0] - xy[j, 0]
                    dy = xy[i, 1] - xy[j, 1]
                    if dx * dx + dy * dy <= eps2:
                        c += 1
        counts[i + 1] = c
    indptr = np.cumsum(counts)
    indices = np.empty(indptr[n], dtype=np.int64)
    for i in range(n):
        cx = int(np.floor((xy[i, 0] - minx) / cell))
        cy = int(np.floor((xy[i, 1] - miny) / cell))
        x0 = cx - 1 if cx - 1 > 0 else 0
        x1 = cx + 1 if cx + 1 < nx - 1 else nx - 1
        y0 = cy - 1 if cy - 1 > 0 else 0
        y1 = cy + 1 if cy + 1 < ny - 1 else ny - 1
        p = indptr[i]
        for gx in range(x0, x1 + 1):
            for gy in range(y0, y1 + 1):
                cid = gx * ny + gy
                for k in range(indptr_g[cid], indptr_g[cid + 1]):
                    j = order[k]
                    if j == i:
                        continue
                    dx = xy[i, 0] - xy[j, 0]
                    dy = xy[i, 1] - xy[j, 1]
                    if dx * dx + dy * dy <= eps2:
                        indices[p] = j
                        p += 1
        # cell-major collection order is not index order, so sort the row
        indices[indptr[i]:indptr[i + 1]] = np.sort(
            indices[indptr[i]:indptr[i + 1]])
    return indptr, indices


@njit(cache=True)
def radius_csr_brute(xy, eps):
    """Brute-force variant of radius_csr_grid, O(n^2)."""
    n = xy.shape[0]
    eps2 = eps * eps
    counts = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        c = 0
        for j in range(n):
            if j == i:
                continue
            dx = xy[i, 0] - xy[j, 0]
            dy = xy[i, 1] - xy[j, 1]
            if dx * dx + dy * dy <= eps2:
                c += 1
        counts[i + 1] = c
    indptr = np.cumsum(counts)
    indices = np.empty(indptr[n], dtype=np.int64)
    p = 0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            dx = xy[i, 0] - xy[j, 0]
            dy = xy[i, 1] - xy[j, 1]
            if dx * dx + dy * dy <= eps2:
                indices[p] = j
                p += 1
    return indptr, indices
