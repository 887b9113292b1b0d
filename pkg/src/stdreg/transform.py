"""12-parameter affine transforms, trilinear resampling, and the known
deformation grid.

Matrix convention: ``M = Translate . Recenter . Rz Ry Rx . Shear . Scale .
Center`` where Center/Recenter shift the rotation origin to the scene
center.  ``M`` maps source voxel coordinates to target voxel coordinates;
resampling pulls each output voxel back through ``M^-1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .scene import BoundingBox, Scene

TRANSLATION_LEVELS = (0.0, 5.0, 20.0)  # voxels per axis
ROTATION_LEVELS = (0.0, 2.0, 6.0)  # degrees per axis
SCALE_LEVELS = (1.0, 1.05, 1.15)
SHEAR_LEVELS = (0.0, 0.01, 0.05)
GROUP_NAMES = ("small", "medium", "large")


@dataclass(frozen=True)
class AffineParams:
    """Translation (voxels), rotation (degrees), scale, and shear parameters."""

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shear: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(c <= 0 for c in self.scale):
            raise DataError(f"scale factors must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()

    @classmethod
    def from_vector(cls, vec) -> "AffineParams":
        v = [float(x) for x in vec]
        if len(v) != 12:
            raise DataError(f"parameter vector must have 12 entries, got {len(v)}")
        return cls(
            translation=(v[0], v[1], v[2]),
            rotation=(v[3], v[4], v[5]),
            scale=(v[6], v[7], v[8]),
            shear=(v[9], v[10], v[11]),
        )

    def to_vector(self) -> np.ndarray:
        return np.array(
            self.translation + self.rotation + self.scale + self.shear, dtype=np.float64
        )

    def is_identity(self, tol: float = 0.0) -> bool:
        ref = AffineParams.identity().to_vector()
        return bool(np.all(np.abs(self.to_vector() - ref) <= tol))


@dataclass(frozen=True)
class DeformationCell:
    """One grid cell: per-component levels, realized parameters, and group."""

    levels: tuple[int, int, int, int]  # (rotation, translation, scale, shear), 0..2
    params: AffineParams
    group: str
    cell_id: str


def _translate(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


def _scale_matrix(c) -> np.ndarray:
    m = np.eye(4)
    m[0, 0], m[1, 1], m[2, 2] = c
    return m


def _shear_matrix(h) -> np.ndarray:
    hxy, hxz, hyz = h
    m = np.eye(4)
    m[0, 1] = hxy
    m[0, 2] = hxz
    m[1, 2] = hyz
    return m


def _rot_x(rad: float) -> np.ndarray:
    c, s = math.cos(rad), math.sin(rad)
    m = np.eye(4)
    m[1, 1], m[1, 2], m[2, 1], m[2, 2] = c, -s, s, c
    return m


def _rot_y(rad: float) -> np.ndarray:
    c, s = math.cos(rad), math.sin(rad)
    m = np.eye(4)
    m[0, 0], m[0, 2], m[2, 0], m[2, 2] = c, s, -s, c
    return m


def _rot_z(rad: float) -> np.ndarray:
    c, s = math.cos(rad), math.sin(rad)
    m = np.eye(4)
    m[0, 0], m[0, 1], m[1, 0], m[1, 1] = c, -s, s, c
    return m


def _factors(params: AffineParams, center) -> list[np.ndarray]:
    rx, ry, rz = (math.radians(a) for a in params.rotation)
    return [
        _translate(params.translation),
        _translate(center),
        _rot_z(rz),
        _rot_y(ry),
        _rot_x(rx),
        _shear_matrix(params.shear),
        _scale_matrix(params.scale),
        _translate([-c for c in center]),
    ]


def _product(mats) -> np.ndarray:
    out = np.eye(4)
    for m in mats:
        out = out @ m
    return out


def matrix(params: AffineParams, center) -> np.ndarray:
    """Homogeneous 4x4 matrix mapping source voxel coords to target coords."""
    return _product(_factors(params, center))


def matrix_derivatives(params: AffineParams, center) -> np.ndarray:
    """Analytic derivative of :func:`matrix` w.r.t. each of the 12 parameters.

    Returns shape (12, 4, 4) ordered as the parameter vector
    (tx, ty, tz, rx, ry, rz, cx, cy, cz, hxy, hxz, hyz); rotation
    derivatives are per degree.
    """
    rx, ry, rz = (math.radians(a) for a in params.rotation)
    factors = _factors(params, center)
    deriv = np.zeros((12, 4, 4))

    def single(idx_factor: int, dmat: np.ndarray) -> np.ndarray:
        mats = list(factors)
        mats[idx_factor] = dmat
        return _product(mats)

    for axis in range(3):  # translation
        d = np.zeros((4, 4))
        d[axis, 3] = 1.0
        deriv[axis] = single(0, d)

    scale_deg = math.pi / 180.0
    dz = np.zeros((4, 4))
    dz[0, 0], dz[0, 1], dz[1, 0], dz[1, 1] = -math.sin(rz), -math.cos(rz), math.cos(rz), -math.sin(rz)
    dy = np.zeros((4, 4))
    dy[0, 0], dy[0, 2], dy[2, 0], dy[2, 2] = -math.sin(ry), math.cos(ry), -math.cos(ry), -math.sin(ry)
    dx = np.zeros((4, 4))
    dx[1, 1], dx[1, 2], dx[2, 1], dx[2, 2] = -math.sin(rx), -math.cos(rx), math.cos(rx), -math.sin(rx)
    deriv[3] = single(4, dx) * scale_deg
    deriv[4] = single(3, dy) * scale_deg
    deriv[5] = single(2, dz) * scale_deg

    for axis in range(3):  # scale
        d = np.zeros((4, 4))
        d[axis, axis] = 1.0
        deriv[6 + axis] = single(6, d)

    for k, (i, j) in enumerate([(0, 1), (0, 2), (1, 2)]):  # shear hxy, hxz, hyz
        d = np.zeros((4, 4))
        d[i, j] = 1.0
        deriv[9 + k] = single(5, d)
    return deriv


def params_from_matrix(m: np.ndarray, center) -> AffineParams:
    """Recover the 12 parameters realizing ``m`` under this module's convention.

    The linear block is factored as rotation times an upper-triangular
    shear-scale product via QR with a positive-diagonal sign convention.
    """
    a = np.asarray(m, dtype=np.float64)[:3, :3]
    if np.linalg.det(a) <= 0:
        raise NumericalError("cannot decompose an affine with non-positive determinant")
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[np.newaxis, :]
    r = r * signs[:, np.newaxis]
    if np.linalg.det(q) < 0:
        raise NumericalError("improper rotation in affine decomposition")

    scale = (r[0, 0], r[1, 1], r[2, 2])
    shear = (r[0, 1] / r[1, 1], r[0, 2] / r[2, 2], r[1, 2] / r[2, 2])
    ry = math.asin(max(-1.0, min(1.0, -q[2, 0])))
    rx = math.atan2(q[2, 1], q[2, 2])
    rz = math.atan2(q[1, 0], q[0, 0])
    rotation = tuple(math.degrees(v) for v in (rx, ry, rz))

    center = np.asarray(center, dtype=np.float64)
    translation = np.asarray(m, dtype=np.float64)[:3, 3] - center + a @ center
    return AffineParams(
        translation=tuple(float(v) for v in translation),
        rotation=rotation,  # type: ignore[arg-type]
        scale=tuple(float(v) for v in scale),
        shear=tuple(float(v) for v in shear),
    )


def compose(outer: AffineParams, inner: AffineParams, center) -> AffineParams:
    """Parameters of ``outer`` applied after ``inner``."""
    return params_from_matrix(matrix(outer, center) @ matrix(inner, center), center)


def inverse(params: AffineParams, center) -> AffineParams:
    return params_from_matrix(np.linalg.inv(matrix(params, center)), center)


def apply_matrix(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a homogeneous matrix to points of shape (N, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ m[:3, :3].T + m[:3, 3]


def trilinear_sample(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``values`` at ``pts`` (3, N); outside -> 0."""
    sample, _ = _trilinear(values, pts, need_grad=False)
    return sample


def trilinear_sample_with_grad(values: np.ndarray, pts: np.ndarray):
    """Interpolated values and their spatial gradient (3, N); outside -> 0."""
    return _trilinear(values, pts, need_grad=True)


def _trilinear(values: np.ndarray, pts: np.ndarray, need_grad: bool):
    nx, ny, nz = values.shape
    x, y, z = pts[0], pts[1], pts[2]
    valid = (
        (x >= 0.0) & (x <= nx - 1) & (y >= 0.0) & (y <= ny - 1) & (z >= 0.0) & (z <= nz - 1)
    )
    xc = np.clip(x, 0.0, nx - 1)
    yc = np.clip(y, 0.0, ny - 1)
    zc = np.clip(z, 0.0, nz - 1)
    x0 = np.minimum(np.floor(xc), nx - 2).astype(np.int64) if nx > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.minimum(np.floor(yc), ny - 2).astype(np.int64) if ny > 1 else np.zeros_like(yc, dtype=np.int64)
    z0 = np.minimum(np.floor(zc), nz - 2).astype(np.int64) if nz > 1 else np.zeros_like(zc, dtype=np.int64)
    fx = xc - x0
    fy = yc - y0
    fz = zc - z0
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    v = values.astype(np.float64, copy=False)
    v000 = v[x0, y0, z0]
    v100 = v[x1, y0, z0]
    v010 = v[x0, y1, z0]
    v110 = v[x1, y1, z0]
    v001 = v[x0, y0, z1]
    v101 = v[x1, y0, z1]
    v011 = v[x0, y1, z1]
    v111 = v[x1, y1, z1]

    c00 = v000 * (1 - fx) + v100 * fx
    c10 = v010 * (1 - fx) + v110 * fx
    c01 = v001 * (1 - fx) + v101 * fx
    c11 = v011 * (1 - fx) + v111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    sample = c0 * (1 - fz) + c1 * fz
    sample = np.where(valid, sample, 0.0)

    if not need_grad:
        return sample, None

    dx00 = v100 - v000
    dx10 = v110 - v010
    dx01 = v101 - v001
    dx11 = v111 - v011
    gx = (dx00 * (1 - fy) + dx10 * fy) * (1 - fz) + (dx01 * (1 - fy) + dx11 * fy) * fz
    gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
    gz = c1 - c0
    grad = np.vstack([gx, gy, gz])
    grad[:, ~valid] = 0.0
    return sample, grad


def resample(scene: Scene, params: AffineParams) -> Scene:
    """Resample a scene under an affine map about the scene center.

    Output voxel ``v`` receives the trilinear interpolation of the source at
    ``M^-1 v``; samples outside the source grid produce 0.  Dims, spacing,
    and tags are unchanged.
    """
    m = matrix(params, scene.center())
    try:
        minv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular affine matrix: {exc}") from exc
    nx, ny, nz = scene.dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pts = np.vstack(
        [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")]
    ).astype(np.float64)
    src_pts = minv[:3, :3] @ pts + minv[:3, 3:4]
    sample = trilinear_sample(scene.values, src_pts)
    out = np.floor(sample + 0.5).astype(np.int64)
    np.clip(out, 0, scene.intensity_ceiling, out=out)
    return scene.with_values(out.reshape(scene.dims, order="F"))


def deformation_grid() -> list[DeformationCell]:
    """The 3^4 = 81 known deformation cells.

    Per-component magnitudes follow the fixed level tables; every non-zero
    level applies its magnitude with positive sign on all three axes.  A
    cell's group is its strongest component level: any large component makes
    the cell large, else any medium makes it medium, else small.
    """
    cells = []
    for ir, it, ic, ih in itertools.product(range(3), repeat=4):
        r = ROTATION_LEVELS[ir]
        t = TRANSLATION_LEVELS[it]
        c = SCALE_LEVELS[ic]
        h = SHEAR_LEVELS[ih]
        params = AffineParams(
            translation=(t, t, t),
            rotation=(r, r, r),
            scale=(c, c, c),
            shear=(h, h, h),
        )
        group = GROUP_NAMES[max(ir, it, ic, ih)]
        cells.append(
            DeformationCell(
                levels=(ir, it, ic, ih),
                params=params,
                group=group,
                cell_id=f"r{ir}t{it}s{ic}h{ih}",
            )
        )
    return cells


def grid_subset_27() -> list[DeformationCell]:
    """The canonical 27-cell desk-scale subset: all zero-shear cells."""
    return [cell for cell in deformation_grid() if cell.levels[3] == 0]


def cell_by_id(cell_id: str) -> DeformationCell:
    for cell in deformation_grid():
        if cell.cell_id == cell_id:
            return cell
    raise DataError(f"unknown deformation cell {cell_id!r}")


def rmse_corners(
    truth: AffineParams,
    recovered: AffineParams,
    box: BoundingBox,
    voxel_size,
    center,
) -> float:
    """Root-mean-squared mm displacement between two transforms at the 8
    corners of a bounding box."""
    corners = box.corners()
    vs = np.asarray(voxel_size, dtype=np.float64)
    pts_truth = apply_matrix(matrix(truth, center), corners)
    pts_rec = apply_matrix(matrix(recovered, center), corners)
    d_mm = (pts_truth - pts_rec) * vs
    return float(np.sqrt(np.mean(np.sum(d_mm * d_mm, axis=1))))
