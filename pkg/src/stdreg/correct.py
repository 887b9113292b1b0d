"""Iterative intensity non-uniformity correction.

Each pass finds the largest homogeneous connected region of the foreground,
fits a full quadratic polynomial to its intensities, normalizes the fit to
mean 1 over the region, and divides the entire scene by the fitted field.
Passes repeat until the largest region stops growing appreciably, which
signals that smooth shading no longer fragments homogeneous tissue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from . import _quad
from .errors import DataError, DegenerateFitError, EmptyForegroundError
from .scene import Scene, foreground_histogram, percentile_intensity

DEFAULT_GROWTH_TOL = 0.05
DEFAULT_MAX_ITERS = 10
# Default homogeneity tolerance as a fraction of the foreground median.
DEFAULT_THETA_FRACTION = 0.05


@dataclass(frozen=True)
class HomogeneityCriterion:
    """Maximum absolute intensity step allowed between 26-neighbors."""

    theta: float

    def __post_init__(self):
        if self.theta < 0:
            raise DataError(f"theta must be >= 0, got {self.theta}")


def default_criterion(scene: Scene) -> HomogeneityCriterion:
    median = percentile_intensity(foreground_histogram(scene), 50.0)
    return HomogeneityCriterion(theta=DEFAULT_THETA_FRACTION * median)


@dataclass(frozen=True)
class BiasModel:
    """Quadratic shading estimate, normalized to mean 1 over its fit region.

    ``coefficients`` follow the ``_quad`` basis order
    ``[1, x, y, z, x^2, y^2, z^2, xy, xz, yz]`` over per-axis normalized
    coordinates for the grid in ``dims``.
    """

    coefficients: np.ndarray
    dims: tuple[int, int, int]

    def field(self) -> np.ndarray:
        return _quad.evaluate_field(self.coefficients, self.dims)


# The 13 forward neighbor offsets of 26-connectivity (mirror pairs omitted;
# the region graph is undirected).
_FORWARD_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
]


def _offset_slices(offset: tuple[int, int, int]):
    src, dst = [], []
    for d in offset:
        if d == 0:
            src.append(slice(None))
            dst.append(slice(None))
        elif d > 0:
            src.append(slice(None, -d))
            dst.append(slice(d, None))
        else:
            src.append(slice(-d, None))
            dst.append(slice(None, d))
    return tuple(src), tuple(dst)


def largest_homogeneous_region(scene: Scene, crit: HomogeneityCriterion) -> np.ndarray:
    """Boolean mask of the largest homogeneous 26-connected foreground region.

    Two adjacent foreground voxels belong to the same region when their
    intensities differ by at most ``theta``; regions are the connected
    components of that adjacency graph.  Size ties break toward the region
    containing the smallest voxel in x-fastest scan order.
    """
    values = scene.values
    fg = values > 0
    if not fg.any():
        raise EmptyForegroundError("scene has no foreground voxels")

    n = values.size
    # Linear indices in x-fastest scan order, matching the file layout.
    index = np.arange(n).reshape(values.shape, order="F")
    rows, cols = [], []
    for offset in _FORWARD_OFFSETS:
        src, dst = _offset_slices(offset)
        ok = (
            fg[src]
            & fg[dst]
            & (np.abs(values[src].astype(np.int64) - values[dst].astype(np.int64)) <= crit.theta)
        )
        rows.append(index[src][ok].ravel())
        cols.append(index[dst][ok].ravel())
    i = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    j = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    graph = sparse.coo_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)

    fg_flat = fg.ravel(order="F")
    labels_fg = labels[fg_flat]
    sizes = np.bincount(labels_fg)
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size)
    if len(candidates) == 1:
        best = candidates[0]
    else:
        # Tie: pick the component whose first voxel appears earliest in scan order.
        best = min(candidates, key=lambda lab: int(np.argmax(labels == lab)))
    mask_flat = (labels == best) & fg_flat
    return mask_flat.reshape(values.shape, order="F")


def fit_bias(scene: Scene, region: np.ndarray) -> BiasModel:
    """Least-squares quadratic fit to intensities over ``region``.

    The fitted polynomial is rescaled to mean value 1 over the region and
    must stay strictly positive over the whole grid (it is later used as a
    divisor).
    """
    coords = np.argwhere(region)
    if len(coords) < _quad.N_COEFFS:
        raise DataError(
            f"bias fit needs at least {_quad.N_COEFFS} voxels, got {len(coords)}"
        )
    design = _quad.design_matrix(coords, scene.dims)
    target = scene.values[region].astype(np.float64)
    coeffs, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < _quad.N_COEFFS:
        raise DegenerateFitError(
            f"rank-deficient quadratic fit (rank {rank} < {_quad.N_COEFFS})"
        )
    mean_over_region = float(design.mean(axis=0) @ coeffs)
    if mean_over_region <= 0:
        raise DegenerateFitError("fitted field has non-positive mean over region")
    coeffs = coeffs / mean_over_region
    model = BiasModel(coefficients=coeffs, dims=scene.dims)
    if model.field().min() <= 0:
        raise DegenerateFitError("fitted field is not strictly positive over the grid")
    return model


def _divide_out(scene: Scene, model: BiasModel) -> Scene:
    field = model.field()
    corrected = np.floor(scene.values / field + 0.5).astype(np.int64)
    fg = scene.values > 0
    # Division by a positive field must never evict a voxel from the foreground.
    corrected[fg] = np.clip(corrected[fg], 1, scene.intensity_ceiling)
    corrected[~fg] = 0
    return scene.with_values(corrected)


def correct_scene(
    scene: Scene,
    crit: HomogeneityCriterion | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    growth_tol: float = DEFAULT_GROWTH_TOL,
) -> Scene:
    """Remove smooth multiplicative shading from a scene.

    Stops after a pass when the newly found largest homogeneous region is
    not larger than ``(1 + growth_tol)`` times the previous one, or after
    ``max_iters`` passes.
    """
    if max_iters < 1:
        raise DataError(f"max_iters must be >= 1, got {max_iters}")
    if growth_tol < 0:
        raise DataError(f"growth_tol must be >= 0, got {growth_tol}")
    if crit is None:
        crit = default_criterion(scene)

    current = scene
    previous_size: int | None = None
    for _ in range(max_iters):
        region = largest_homogeneous_region(current, crit)
        size = int(region.sum())
        if previous_size is not None and size <= (1.0 + growth_tol) * previous_size:
            break
        model = fit_bias(current, region)
        current = _divide_out(current, model)
        previous_size = size
    return current
