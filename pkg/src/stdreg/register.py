"""Affine registration by sum-of-squared-differences minimization.

Coarse-to-fine Levenberg-Marquardt over the 12 affine parameters.  The
residual at a target voxel is the trilinearly interpolated source intensity
at the back-projected position minus the target intensity; the Jacobian
combines the analytic interpolation gradient with the analytic derivative
of the back-projection w.r.t. each parameter.  Cost is evaluated over the
target foreground only, which keeps flat background from dominating.

All accumulation runs in float64 with fixed-order reductions, so a
registration is bit-reproducible for identical inputs and configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, EmptyForegroundError, NumericalError
from .scene import Scene
from .transform import (
    AffineParams,
    matrix,
    matrix_derivatives,
    trilinear_sample,
    trilinear_sample_with_grad,
)

DAMPING_CAP = 1e8
DAMPING_SHRINK = 0.1
DAMPING_GROW = 10.0
MIN_LEVEL_EXTENT = 8  # do not downsample below this many voxels per axis
MIN_MASK_VOXELS = 32


@dataclass(frozen=True)
class RegistrationConfig:
    """Optimizer settings.

    ``coarse_search_range`` widens the capture range: before the coarsest
    level starts, the initial translation is replaced by the lowest-cost
    integer offset within ``+/- range`` voxels (spacing
    ``coarse_search_step``) around it.  The sweep is exhaustive and
    deterministic; set the range to 0 to start strictly from
    ``initial_params``.
    """

    pyramid_levels: int = 3
    max_iters: int = 50
    convergence_tol: float = 1e-6
    damping: float = 1e-3
    initial_params: AffineParams = field(default_factory=AffineParams)
    coarse_search_range: float = 8.0
    coarse_search_step: float = 2.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise DataError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.max_iters < 1:
            raise DataError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.convergence_tol <= 0 or self.damping <= 0:
            raise DataError("convergence_tol and damping must be positive")
        if self.coarse_search_range < 0 or self.coarse_search_step <= 0:
            raise DataError("coarse search range must be >= 0 and step > 0")


@dataclass
class RegistrationResult:
    params: AffineParams
    final_ssd: float
    iterations_used: int
    converged: bool
    per_level_trace: list[tuple[int, int, float]]


def ssd(source: Scene, target: Scene, params: AffineParams, mask: np.ndarray | None = None) -> float:
    """Sum of squared intensity differences over the mask (default: target
    foreground).  Out-of-grid source samples count as intensity 0."""
    if source.dims != target.dims:
        raise DataError(f"scene dims differ: {source.dims} vs {target.dims}")
    if mask is None:
        mask = target.values > 0
    pts = np.argwhere(mask).T.astype(np.float64)
    tgt = target.values[mask].astype(np.float64)
    minv = np.linalg.inv(matrix(params, target.center()))
    src_pts = minv[:3, :3] @ pts + minv[:3, 3:4]
    sample = trilinear_sample(source.values, src_pts)
    r = sample - tgt
    return float(np.einsum("i,i->", r, r))


def _box_downsample(values: np.ndarray) -> np.ndarray:
    """2x2x2 box average; trailing odd slices are cropped."""
    nx, ny, nz = values.shape
    v = values[: nx - nx % 2, : ny - ny % 2, : nz - nz % 2].astype(np.float64)
    v = v.reshape(v.shape[0] // 2, 2, v.shape[1] // 2, 2, v.shape[2] // 2, 2)
    return v.mean(axis=(1, 3, 5))


def _build_pyramid(values: np.ndarray, levels: int) -> list[np.ndarray]:
    """Fine-to-coarse pyramid of float64 volumes."""
    pyramid = [values.astype(np.float64)]
    for _ in range(levels - 1):
        prev = pyramid[-1]
        if min(prev.shape) < 2 * MIN_LEVEL_EXTENT:
            break
        pyramid.append(_box_downsample(prev))
    return pyramid


def _center(shape) -> tuple[float, float, float]:
    return tuple((n - 1) / 2.0 for n in shape)


def _level_ssd(src: np.ndarray, tgt_vals: np.ndarray, pts: np.ndarray, minv: np.ndarray) -> float:
    src_pts = minv[:3, :3] @ pts + minv[:3, 3:4]
    sample = trilinear_sample(src, src_pts)
    r = sample - tgt_vals
    return float(np.einsum("i,i->", r, r))


def _translation_sweep(
    src: np.ndarray,
    tgt_vals: np.ndarray,
    pts: np.ndarray,
    center,
    start: AffineParams,
    config: RegistrationConfig,
) -> AffineParams:
    """Exhaustive integer-offset translation probe around the start params."""
    offsets = np.arange(
        -config.coarse_search_range,
        config.coarse_search_range + 1e-9,
        config.coarse_search_step,
    )
    best = start
    best_ssd = math.inf
    base = start.translation
    for dx in offsets:
        for dy in offsets:
            for dz in offsets:
                cand = replace(
                    start, translation=(base[0] + dx, base[1] + dy, base[2] + dz)
                )
                minv = np.linalg.inv(matrix(cand, center))
                value = _level_ssd(src, tgt_vals, pts, minv)
                if value < best_ssd:
                    best_ssd = value
                    best = cand
    return best


def _optimize_level(
    src: np.ndarray,
    tgt: np.ndarray,
    start: AffineParams,
    config: RegistrationConfig,
    level_index: int,
    is_coarsest: bool,
    trace: list[tuple[int, int, float]],
) -> tuple[AffineParams, float, int, bool]:
    mask = tgt > 0
    if level_index > 0 and int(mask.sum()) < MIN_MASK_VOXELS:
        return start, float("nan"), 0, True  # coarse level too sparse to inform
    if not mask.any():
        raise EmptyForegroundError("target level has no foreground voxels")

    center = _center(tgt.shape)
    pts = np.argwhere(mask).T.astype(np.float64)
    pts_h = np.vstack([pts, np.ones((1, pts.shape[1]))])
    tgt_vals = tgt[mask]

    if is_coarsest and config.coarse_search_range > 0:
        start = _translation_sweep(src, tgt_vals, pts, center, start, config)

    theta = start.to_vector()
    params = start
    m = matrix(params, center)
    current = _level_ssd(src, tgt_vals, pts, np.linalg.inv(m))
    if not np.isfinite(current):
        raise NumericalError(f"non-finite cost at pyramid level {level_index}")
    trace.append((level_index, 0, current))

    lam = config.damping
    accepted = 0
    converged = False
    for _ in range(config.max_iters):
        minv = np.linalg.inv(matrix(params, center))
        src_pts = minv[:3, :3] @ pts + minv[:3, 3:4]
        sample, grad = trilinear_sample_with_grad(src, src_pts)
        r = sample - tgt_vals

        derivs = matrix_derivatives(params, center)
        jac = np.empty((pts.shape[1], 12))
        src_pts_h = np.vstack([src_pts, np.ones((1, pts.shape[1]))])
        for i in range(12):
            # d(M^-1 v)/d theta_i = -(M^-1 dM_i) (M^-1 v)
            q = -(minv @ derivs[i]) @ src_pts_h
            jac[:, i] = np.einsum("kn,kn->n", grad, q[:3])

        jtj = np.einsum("ni,nj->ij", jac, jac)
        jtr = np.einsum("ni,n->i", jac, r)
        diag = np.diag(jtj).copy()
        diag_floor = max(diag.max(), 1.0) * 1e-12
        diag = np.maximum(diag, diag_floor)

        improved = False
        while lam <= DAMPING_CAP:
            h = jtj + lam * np.diag(diag)
            try:
                step = np.linalg.solve(h, jtr)
            except np.linalg.LinAlgError:
                lam *= DAMPING_GROW
                continue
            cand_vec = theta - step
            if not np.all(np.isfinite(cand_vec)) or np.any(cand_vec[6:9] <= 0):
                lam *= DAMPING_GROW
                continue
            cand = AffineParams.from_vector(cand_vec)
            try:
                cand_minv = np.linalg.inv(matrix(cand, center))
            except np.linalg.LinAlgError:
                lam *= DAMPING_GROW
                continue
            cand_ssd = _level_ssd(src, tgt_vals, pts, cand_minv)
            if np.isfinite(cand_ssd) and cand_ssd < current:
                improvement = (current - cand_ssd) / max(current, np.finfo(float).tiny)
                params = cand
                theta = cand_vec
                current = cand_ssd
                accepted += 1
                trace.append((level_index, accepted, current))
                lam = max(lam * DAMPING_SHRINK, 1e-12)
                improved = True
                if improvement < config.convergence_tol:
                    converged = True
                break
            lam *= DAMPING_GROW
        if not improved:
            converged = True  # no decrease possible within the damping cap
            break
        if converged:
            break
    if not np.isfinite(current):
        raise NumericalError(f"non-finite cost at pyramid level {level_index}")
    return params, current, accepted, converged


def register(source: Scene, target: Scene, config: RegistrationConfig | None = None) -> RegistrationResult:
    """Recover the affine transform mapping ``source`` onto ``target``.

    Runs coarse to fine; the coarser level's estimate seeds the next level
    with its translation doubled (all other parameters are center-relative
    and transfer unchanged).
    """
    if config is None:
        config = RegistrationConfig()
    if source.dims != target.dims:
        raise DataError(f"scene dims differ: {source.dims} vs {target.dims}")
    if not (source.values > 0).any() or not (target.values > 0).any():
        raise EmptyForegroundError("registration requires non-empty foregrounds")

    src_pyr = _build_pyramid(source.values, config.pyramid_levels)
    tgt_pyr = _build_pyramid(target.values, config.pyramid_levels)
    n_levels = min(len(src_pyr), len(tgt_pyr))

    # Seed the coarsest level: translation shrinks by 2 per downsampling.
    init = config.initial_params
    params = replace(
        init,
        translation=tuple(t / (2 ** (n_levels - 1)) for t in init.translation),
    )

    trace: list[tuple[int, int, float]] = []
    total_iters = 0
    converged = True
    final_ssd = float("nan")
    for level_index in range(n_levels - 1, -1, -1):
        params, level_ssd, iters, level_conv = _optimize_level(
            src_pyr[level_index],
            tgt_pyr[level_index],
            params,
            config,
            level_index,
            level_index == n_levels - 1,
            trace,
        )
        total_iters += iters
        if level_index == 0:
            final_ssd = level_ssd
            converged = level_conv
        if level_index > 0:
            params = replace(
                params, translation=tuple(2.0 * t for t in params.translation)
            )
    return RegistrationResult(
        params=params,
        final_ssd=final_ssd,
        iterations_used=total_iters,
        converged=converged,
        per_level_trace=trace,
    )
