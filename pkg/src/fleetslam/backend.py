"""Kernel backend selection.

The spatial-search kernels that dominate registration and clustering
runtime exist twice: a numba-compiled grid implementation and a
numpy/scipy fallback. Which one runs is chosen once per process from
the environment variable FLEETSLAM_BACKEND:

    auto    use numba when importable, else numpy (default)
    numba   require the compiled kernels, raise if numba is missing
    numpy   force the fallback kernels

set_backend() overrides the choice at runtime, which the tests and the
kernel benchmark use to compare both paths in one process.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from fleetslam import _np_kernels

# grid cells along one axis beyond which the compiled path switches to
# its brute-force kernel instead of allocating a huge cell table
_MAX_GRID_CELLS = 4_000_000

_VALID = ("auto", "numba", "numpy")
_forced: str | None = None
_nb = None
_nb_failed = False


def _load_numba_kernels():
    """Imports the compiled kernels once, remembering failure."""
    global _nb, _nb_failed
    if _nb is None and not _nb_failed:
        try:
            from fleetslam import _nb_kernels
            _nb = _nb_kernels
        except ImportError:
            _nb_failed = True
    return _nb


def set_backend(name: str) -> str:
    """Forces the kernel backend for this process.

    Args:
        name: "auto", "numba", or "numpy".

    Returns:
        The backend that is now active ("numba" or "numpy").
    """
    global _forced
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    _forced = name
    return active_backend()


def active_backend() -> str:
    """Returns the kernel backend currently in effect."""
    choice = _forced or os.environ.get("FLEETSLAM_BACKEND", "auto")
    if choice not in _VALID:
        warnings.warn(
            f"FLEETSLAM_BACKEND={choice!r} not recognized, using auto")
        choice = "auto"
    if choice == "numpy":
        return "numpy"
    kernels = _load_numba_kernels()
    if kernels is not None:
        return "numba"
    if choice == "numba":
        raise RuntimeError("numba backend requested but numba is unavailable")
    return "numpy"


def _grid_ok(pts: np.ndarray, cell: float) -> bool:
    if pts.shape[0] == 0 or cell <= 0 or not np.isfinite(cell):
        return False
    span = pts.max(axis=0) - pts.min(axis=0)
    nx = int(span[0] // cell) + 1
    ny = int(span[1] // cell) + 1
    return nx * ny <= _MAX_GRID_CELLS


def nn_within(src, tgt, max_dist: float):
    """Nearest reference point within max_dist for each query point.

    Args:
        src: (n, 2) query points.
        tgt: (m, 2) reference points.
        max_dist: inclusive distance cap, > 0.

    Returns:
        (idx, dist): int64 indices into tgt (-1 for no neighbor) and
        float64 distances (inf for no neighbor).
    """
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 2)
    tgt = np.ascontiguousarray(tgt, dtype=np.float64).reshape(-1, 2)
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        return (np.full(src.shape[0], -1, dtype=np.int64),
                np.full(src.shape[0], np.inf))
    if active_backend() == "numba":
        if _grid_ok(tgt, max_dist):
            return _nb.nn_within_grid(src, tgt, max_dist)
        return _nb.nn_within_brute(src, tgt, max_dist)
    return _np_kernels.nn_within(src, tgt, max_dist)


def radius_csr(xy, eps: float):
    """Radius-eps neighborhoods of every point, CSR layout, self excluded.

    Args:
        xy: (n, 2) points.
        eps: inclusive neighborhood radius, > 0.

    Returns:
        (indptr, indices): neighbor lists sorted ascending per row.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64).reshape(-1, 2)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if xy.shape[0] == 0:
        return np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if active_backend() == "numba":
        if _grid_ok(xy, eps):
            return _nb.radius_csr_grid(xy, eps)
        return _nb.radius_csr_brute(xy, eps)
    return _np_kernels.radius_csr(xy, eps)
