"""Shared full-quadratic polynomial basis over voxel coordinates.

Coordinates are normalized per axis to [-1, 1] before evaluation so fits
stay well conditioned; basis column order is
``[1, x, y, z, x^2, y^2, z^2, xy, xz, yz]``.
"""

from __future__ import annotations

import numpy as np

N_COEFFS = 10


def normalize_coords(coords: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Map voxel coordinates (N, 3) onto [-1, 1] per axis."""
    out = np.empty_like(coords, dtype=np.float64)
    for axis in range(3):
        half = max((dims[axis] - 1) / 2.0, 0.5)
        out[:, axis] = (coords[:, axis] - (dims[axis] - 1) / 2.0) / half
    return out


def design_matrix(coords: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Quadratic design matrix (N, 10) for voxel coordinates (N, 3)."""
    u = normalize_coords(np.asarray(coords, dtype=np.float64), dims)
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return np.column_stack(
        [np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]
    )


def grid_coords(dims: tuple[int, int, int]) -> np.ndarray:
    """All voxel coordinates of a grid in x-fastest scan order, shape (N, 3)."""
    nx, ny, nz = dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    return np.column_stack(
        [x.ravel(order="F"), y.ravel(order="F"), z.ravel(order="F")]
    ).astype(np.float64)


def evaluate_field(coeffs: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Evaluate the polynomial over the whole grid, returned as (nx, ny, nz)."""
    coords = grid_coords(dims)
    flat = design_matrix(coords, dims) @ np.asarray(coeffs, dtype=np.float64)
    return flat.reshape(dims, order="F")
