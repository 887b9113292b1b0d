"""Core 3D scene container, bit-exact file I/O, histograms, and bounding boxes.

A scene couples a dense voxel grid of non-negative integer intensities with
its voxel spacing and acquisition tags.  Intensity 0 means "no measured
data"; every operation in the package treats zero voxels as background.

On disk a scene is a pair of files sharing a base name: ``<name>.scnh`` is a
JSON key-value header and ``<name>.scnr`` is the raw little-endian unsigned
16-bit payload, x-fastest / z-slowest voxel order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import EmptyForegroundError, SceneFormatError

HEADER_SUFFIX = ".scnh"
RAW_SUFFIX = ".scnr"

DEFAULT_CEILING = 4095
U16_MAX = 65535


@dataclass(frozen=True)
class Scene:
    """3D voxel grid with integer intensities, indexed ``values[x, y, z]``.

    ``values`` must never be mutated after construction; derive new scenes
    with :meth:`with_values` instead.
    """

    values: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    body_region: str = "head"
    protocol: str = "T2"
    intensity_ceiling: int = DEFAULT_CEILING

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise SceneFormatError(f"scene array must be 3-D, got ndim={v.ndim}")
        if any(n < 1 for n in v.shape):
            raise SceneFormatError(f"scene dims must all be >= 1, got {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            raise SceneFormatError(f"scene intensities must be integers, got {v.dtype}")
        if any(s <= 0 for s in self.voxel_size):
            raise SceneFormatError(f"voxel size must be positive, got {self.voxel_size}")
        if self.intensity_ceiling < 1:
            raise SceneFormatError("intensity ceiling must be >= 1")
        vmin = int(v.min())
        vmax = int(v.max())
        if vmin < 0:
            raise SceneFormatError(f"negative intensity {vmin} in scene")
        if vmax > self.intensity_ceiling:
            raise SceneFormatError(
                f"intensity {vmax} exceeds ceiling {self.intensity_ceiling}"
            )
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def voxel_count(self) -> int:
        return int(self.values.size)

    def foreground_mask(self) -> np.ndarray:
        return self.values > 0

    def center(self) -> tuple[float, float, float]:
        """Geometric center of the voxel grid, in voxel coordinates."""
        nx, ny, nz = self.dims
        return ((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0)

    def with_values(self, values: np.ndarray, **overrides) -> "Scene":
        """New scene sharing this scene's metadata but holding ``values``."""
        kwargs = dict(
            voxel_size=self.voxel_size,
            body_region=self.body_region,
            protocol=self.protocol,
            intensity_ceiling=self.intensity_ceiling,
        )
        kwargs.update(overrides)
        return Scene(values=values, **kwargs)


@dataclass(frozen=True)
class Histogram:
    """Foreground intensity histogram: value -> voxel count, zeros excluded."""

    counts: dict[int, int]
    total_foreground: int

    def __post_init__(self):
        if 0 in self.counts:
            raise ValueError("histogram must not contain intensity 0")
        if sum(self.counts.values()) != self.total_foreground:
            raise ValueError("histogram counts do not sum to total_foreground")

    def sorted_values(self) -> list[int]:
        return sorted(self.counts)


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive axis-aligned voxel bounding box."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        if any(a > b for a, b in zip(self.min_corner, self.max_corner)):
            raise ValueError(f"inverted bounding box {self.min_corner}..{self.max_corner}")

    def corners(self) -> np.ndarray:
        """The 8 corner voxel positions, shape (8, 3), float64."""
        lo, hi = self.min_corner, self.max_corner
        out = np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])],
            dtype=np.float64,
        )
        return out


def _resolve_pair(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == HEADER_SUFFIX:
        base = p.with_suffix("")
    elif p.suffix == RAW_SUFFIX:
        base = p.with_suffix("")
    else:
        base = p
    return base.with_suffix(HEADER_SUFFIX), base.with_suffix(RAW_SUFFIX)


def load_scene(path: str | Path) -> Scene:
    """Load a scene from its ``.scnh``/``.scnr`` pair.

    ``path`` may point at either file of the pair or at the bare base name.
    """
    header_path, raw_path = _resolve_pair(path)
    if not header_path.is_file():
        raise SceneFormatError(f"missing scene header {header_path}")
    if not raw_path.is_file():
        raise SceneFormatError(f"missing scene raw file {raw_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed scene header {header_path}: {exc}") from exc
    if not isinstance(header, dict):
        raise SceneFormatError(f"scene header {header_path} is not a JSON object")

    try:
        dims = tuple(int(d) for d in header["dims"])
        voxel_size = tuple(float(s) for s in header["voxel_size_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad dims/voxel_size in {header_path}: {exc}") from exc
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise SceneFormatError(f"dims must be 3 positive integers, got {dims}")
    if len(voxel_size) != 3 or any(s <= 0 for s in voxel_size):
        raise SceneFormatError(f"voxel_size_mm must be 3 positive numbers, got {voxel_size}")
    if header.get("dtype", "u16") != "u16":
        raise SceneFormatError(f"unsupported dtype {header.get('dtype')!r} (only u16)")
    if header.get("byte_order", "le") != "le":
        raise SceneFormatError(f"unsupported byte order {header.get('byte_order')!r} (only le)")

    raw = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 2
    if len(raw) != expected:
        raise SceneFormatError(
            f"raw size mismatch for {raw_path}: got {len(raw)} bytes, expected {expected}"
        )
    flat = np.frombuffer(raw, dtype="<u2").astype(np.int32)
    values = flat.reshape(dims, order="F")  # x varies fastest in the file

    ceiling = int(header.get("intensity_ceiling", DEFAULT_CEILING))
    ceiling = max(ceiling, int(values.max()) if values.size else ceiling)
    return Scene(
        values=values,
        voxel_size=voxel_size,  # type: ignore[arg-type]
        body_region=str(header.get("body_region", "head")),
        protocol=str(header.get("protocol", "T2")),
        intensity_ceiling=ceiling,
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    """Write the ``.scnh``/``.scnr`` pair; :func:`load_scene` inverts it bit-exactly."""
    header_path, raw_path = _resolve_pair(path)
    if int(scene.values.max()) > U16_MAX:
        raise SceneFormatError("scene intensities exceed the u16 payload range")
    header = {
        "dims": list(scene.dims),
        "voxel_size_mm": list(scene.voxel_size),
        "dtype": "u16",
        "byte_order": "le",
        "body_region": scene.body_region,
        "protocol": scene.protocol,
        "intensity_ceiling": int(scene.intensity_ceiling),
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    raw_path.write_bytes(scene.values.astype("<u2").ravel(order="F").tobytes())


def foreground_histogram(scene: Scene) -> Histogram:
    """Histogram over voxels with positive intensity."""
    fg = scene.values[scene.values > 0]
    if fg.size == 0:
        raise EmptyForegroundError("scene has no foreground voxels")
    counts = np.bincount(fg.ravel())
    nonzero = np.nonzero(counts)[0]
    return Histogram(
        counts={int(v): int(counts[v]) for v in nonzero},
        total_foreground=int(fg.size),
    )


def percentile_intensity(hist: Histogram, pc: float) -> int:
    """Nearest-rank percentile: smallest value whose cumulative count reaches
    ``ceil(pc/100 * total)``.  ``pc=0`` returns the minimum foreground value.
    """
    if not 0.0 <= pc <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {pc}")
    if hist.total_foreground < 1:
        raise EmptyForegroundError("empty histogram")
    # Exact rational arithmetic keeps the rank free of float round-off.
    rank = math.ceil(Fraction(pc) * hist.total_foreground / 100)
    cumulative = 0
    values = hist.sorted_values()
    for v in values:
        cumulative += hist.counts[v]
        if cumulative >= rank:
            return v
    return values[-1]


def foreground_bounding_box(scene: Scene) -> BoundingBox:
    """Tight axis-aligned box over voxels with positive intensity."""
    mask = scene.values > 0
    if not mask.any():
        raise EmptyForegroundError("scene has no foreground voxels")
    coords = np.argwhere(mask)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    return BoundingBox(tuple(int(c) for c in lo), tuple(int(c) for c in hi))
