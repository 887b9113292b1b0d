"""Deterministic brain-like synthetic volume generator.

Builds paired volumes for two acquisition protocols from one tissue label
map (nested ellipsoids plus small bright lesions), with an optional smooth
multiplicative quadratic shading field and clamped Gaussian noise.  Both
volumes of a pair share the exact same foreground geometry; only the tissue
intensities differ, which is the premise behind consistency testing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _quad
from .errors import DataError
from .scene import DEFAULT_CEILING, Scene

# Fixed shading shape: tilt-dominant so every nested tissue shell spans most
# of the field's dynamic range (coefficients in the _quad basis order).
_BIAS_SHAPE = np.array([0.0, 0.55, 0.25, 0.15, 0.35, -0.15, 0.10, 0.20, -0.10, 0.05])


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid; center and semi-axes as fractions of grid size."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise DataError(f"ellipsoid semi-axes must be positive, got {self.semi_axes}")


@dataclass(frozen=True)
class TissueClass:
    label: str
    mean_t2: int
    mean_pd: int
    shape: Ellipsoid


@dataclass(frozen=True)
class PhantomSpec:
    """Full recipe for one deterministic phantom pair."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tissues: tuple[TissueClass, ...] = ()
    noise_sigma: float = 0.0
    bias_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.tissues:
            object.__setattr__(self, "tissues", tuple(default_tissues()))
        if self.noise_sigma < 0:
            raise DataError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.bias_amplitude <= 0.5:
            raise DataError(
                f"bias amplitude must lie in [0, 0.5], got {self.bias_amplitude}"
            )
        for attr in ("mean_t2", "mean_pd"):
            means = [getattr(t, attr) for t in self.tissues]
            if len(set(means)) != len(means):
                raise DataError(f"tissue {attr} values must be pairwise distinct: {means}")
            if any(m < 1 for m in means):
                raise DataError(f"tissue {attr} values must be >= 1: {means}")


def default_tissues() -> list[TissueClass]:
    """Nested head-like shells plus two bright lesions.

    The shells are deliberately anisotropic and the inner structures sit
    off-center: a near-spherical design leaves rotation almost unobservable
    to an intensity-based registration cost.
    """
    return [
        TissueClass("shell", 200, 600, Ellipsoid((0.5, 0.5, 0.5), (0.36, 0.29, 0.24))),
        TissueClass("wm", 500, 1300, Ellipsoid((0.5, 0.5, 0.5), (0.30, 0.23, 0.19))),
        TissueClass("gm", 800, 1600, Ellipsoid((0.54, 0.47, 0.5), (0.20, 0.15, 0.13))),
        TissueClass("csf", 1900, 1000, Ellipsoid((0.45, 0.53, 0.48), (0.10, 0.065, 0.075))),
        TissueClass("lesion_a", 1400, 1900, Ellipsoid((0.64, 0.58, 0.45), (0.055, 0.045, 0.05))),
        TissueClass("lesion_b", 1100, 1700, Ellipsoid((0.38, 0.40, 0.60), (0.05, 0.055, 0.04))),
    ]


def tissue_label_map(spec: PhantomSpec) -> np.ndarray:
    """Label volume: 0 background, 1..K per tissue, painted in list order."""
    nx, ny, nz = spec.dims
    x, y, z = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for k, tissue in enumerate(spec.tissues, start=1):
        e = tissue.shape
        cx, cy, cz = (e.center[i] * (spec.dims[i] - 1) for i in range(3))
        ax, ay, az = (max(e.semi_axes[i] * spec.dims[i], 1e-6) for i in range(3))
        inside = (
            ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2
        ) <= 1.0
        labels[inside] = k
    return labels


def bias_field(spec: PhantomSpec) -> np.ndarray:
    """Multiplicative shading field, mean 1 over the foreground.

    The field is an affine rescaling of a fixed quadratic polynomial, chosen
    so the max/min ratio over the foreground equals ``1 + bias_amplitude``
    before mean normalization (normalization preserves the ratio).
    """
    labels = tissue_label_map(spec)
    fg = labels > 0
    if not fg.any():
        raise DataError("phantom geometry has no foreground voxels")
    if spec.bias_amplitude == 0.0:
        return np.ones(spec.dims, dtype=np.float64)
    raw = _quad.evaluate_field(_BIAS_SHAPE, spec.dims)
    lo = raw[fg].min()
    hi = raw[fg].max()
    if hi - lo <= 0:
        raise DataError("degenerate shading field over phantom foreground")
    field = 1.0 + spec.bias_amplitude * (raw - lo) / (hi - lo)
    return field / field[fg].mean()


def generate_phantom_pair(spec: PhantomSpec) -> tuple[Scene, Scene]:
    """Generate the (T2, PD) scene pair for a spec; deterministic per seed.

    Noise streams are counter-based and keyed by ``(seed, protocol index)``,
    so regeneration is reproducible regardless of evaluation order.  Noise
    is only applied to foreground voxels and noisy foreground is clamped to
    ``[1, ceiling]`` so both scenes keep the identical foreground mask.
    """
    labels = tissue_label_map(spec)
    if not (labels > 0).any():
        raise DataError("phantom geometry has no foreground voxels")
    field = bias_field(spec)

    scenes = []
    for stream, (protocol, attr) in enumerate([("T2", "mean_t2"), ("PD", "mean_pd")]):
        lut = np.zeros(len(spec.tissues) + 1, dtype=np.float64)
        for k, tissue in enumerate(spec.tissues, start=1):
            lut[k] = getattr(tissue, attr)
        ideal = lut[labels]
        observed = ideal * field
        if spec.noise_sigma > 0:
            rng = np.random.Generator(np.random.Philox(key=[spec.seed, stream]))
            observed = observed + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        values = np.floor(observed + 0.5).astype(np.int64)
        fg = labels > 0
        values[fg] = np.clip(values[fg], 1, DEFAULT_CEILING)
        values[~fg] = 0
        scenes.append(
            Scene(
                values=values,
                voxel_size=spec.voxel_size,
                body_region="head",
                protocol=protocol,
                intensity_ceiling=DEFAULT_CEILING,
            )
        )
    return scenes[0], scenes[1]


def subject_variant(spec: PhantomSpec, subject: int, cohort_seed: int) -> PhantomSpec:
    """Per-subject anatomy and intensity-scale variation for cohort studies.

    Semi-axes are scaled by one global plus per-axis factors (nesting is
    preserved because every tissue gets the same factors); tissue means get
    one global gain per protocol, which leaves their ordering intact.
    """
    rng = np.random.Generator(np.random.Philox(key=[cohort_seed, 7001 + subject]))
    geom = rng.uniform(0.92, 1.06)
    axes = rng.uniform(0.95, 1.05, size=3)
    gain_t2 = rng.uniform(0.80, 1.20)
    gain_pd = rng.uniform(0.80, 1.20)

    tissues = []
    for t in spec.tissues:
        e = t.shape
        semi = tuple(float(e.semi_axes[i] * geom * axes[i]) for i in range(3))
        tissues.append(
            TissueClass(
                label=t.label,
                mean_t2=max(1, int(round(t.mean_t2 * gain_t2))),
                mean_pd=max(1, int(round(t.mean_pd * gain_pd))),
                shape=Ellipsoid(e.center, semi),  # type: ignore[arg-type]
            )
        )
    return replace(
        spec,
        tissues=tuple(tissues),
        seed=int(rng.integers(0, 2**62)),
    )
