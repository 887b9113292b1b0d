"""Two-segment histogram-landmark standardization and its controlled inverse.

Standardization maps a scene's intensity scale onto a fixed standard scale
``[s1, s2]`` by matching three histogram landmarks: a low percentile ``p1``,
the foreground median ``mu``, and a high percentile ``p2``.  Training
averages the mapped medians of a cohort; transformation applies the
resulting two-segment piecewise-linear map per scene.

The inverse mapping walks the same transfer function backwards with chosen
segment slopes ``m1``/``m2``, re-introducing a controlled amount of
intensity non-standardness into an already standardized scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateLandmarksError, ProtocolMismatchError
from .scene import (
    U16_MAX,
    Scene,
    foreground_histogram,
    percentile_intensity,
)

DEFAULT_PC1 = 0.0
DEFAULT_PC2 = 99.8
DEFAULT_S1 = 1
DEFAULT_S2 = 4095


def round_half_up(a: np.ndarray | float) -> np.ndarray | int:
    """Round to the nearest integer, ties away from zero (inputs are >= 0)."""
    if np.isscalar(a):
        return int(np.floor(a + 0.5))
    return np.floor(np.asarray(a) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class LandmarkSet:
    """Low percentile, high percentile, and median of a foreground histogram."""

    p1: int
    p2: int
    mu: int

    def __post_init__(self):
        if not (self.p1 <= self.mu <= self.p2):
            raise DegenerateLandmarksError(
                f"median {self.mu} outside landmark range [{self.p1}, {self.p2}]"
            )
        if self.p1 >= self.p2:
            raise DegenerateLandmarksError(f"flat landmark range p1={self.p1} p2={self.p2}")

    def require_interior_median(self) -> None:
        """Segment slopes are undefined when the median sits on an end."""
        if self.mu == self.p1 or self.mu == self.p2:
            raise DegenerateLandmarksError(
                f"median {self.mu} coincides with a landmark end "
                f"[{self.p1}, {self.p2}]; segment slopes undefined"
            )


@dataclass(frozen=True)
class StandardizationModel:
    """Trained standard-scale parameters for one (body region, protocol) pair."""

    s1: int
    s2: int
    mu_s: int
    body_region: str
    protocol: str
    pc1: float = DEFAULT_PC1
    pc2: float = DEFAULT_PC2
    training_slope_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not (self.s1 < self.mu_s < self.s2):
            raise DataError(
                f"model requires s1 < mu_s < s2, got {self.s1}, {self.mu_s}, {self.s2}"
            )


@dataclass(frozen=True)
class NonStandardnessLevel:
    """One slope band for the inverse mapping; ``clean`` is the identity."""

    id: str
    slope_range: tuple[float, float]
    scale_class: str

    def __post_init__(self):
        lo, hi = self.slope_range
        if not (0.0 < lo <= hi):
            raise DataError(f"slope range must satisfy 0 < lo <= hi, got {self.slope_range}")

    @property
    def is_clean(self) -> bool:
        return self.id == "clean"


def default_levels() -> list[NonStandardnessLevel]:
    """The clean identity level plus the seven injection slope bands."""
    return [
        NonStandardnessLevel("clean", (1.0, 1.0), "none"),
        NonStandardnessLevel("psibar1", (0.9, 1.5), "small"),
        NonStandardnessLevel("psibar2", (0.6, 0.9), "small"),
        NonStandardnessLevel("psibar3", (1.5, 2.0), "medium"),
        NonStandardnessLevel("psibar4", (2.0, 2.4), "medium"),
        NonStandardnessLevel("psibar5", (2.4, 2.7), "large"),
        NonStandardnessLevel("psibar6", (2.7, 3.0), "large"),
        NonStandardnessLevel("psibar7", (3.0, 3.3), "large"),
    ]


def level_by_id(level_id: str) -> NonStandardnessLevel:
    for level in default_levels():
        if level.id == level_id:
            return level
    known = ", ".join(l.id for l in default_levels())
    raise DataError(f"unknown non-standardness level {level_id!r} (known: {known})")


def extract_landmarks(scene: Scene, pc1: float = DEFAULT_PC1, pc2: float = DEFAULT_PC2) -> LandmarkSet:
    """Landmarks of a scene's foreground histogram.

    The median is the foreground 50th percentile, confined to ``[p1, p2]`` so
    the landmark ordering always holds.
    """
    if pc1 >= pc2:
        raise DataError(f"pc1 must be < pc2, got {pc1}, {pc2}")
    hist = foreground_histogram(scene)
    p1 = percentile_intensity(hist, pc1)
    p2 = percentile_intensity(hist, pc2)
    if p1 == p2:
        raise DegenerateLandmarksError(f"flat histogram: p1 == p2 == {p1}")
    median = percentile_intensity(hist, 50.0)
    mu = min(max(median, p1), p2)
    return LandmarkSet(p1=p1, p2=p2, mu=mu)


def _check_cohort_tags(scenes: Sequence[Scene]) -> tuple[str, str]:
    body_regions = {s.body_region for s in scenes}
    protocols = {s.protocol for s in scenes}
    if len(protocols) != 1 or len(body_regions) != 1:
        raise ProtocolMismatchError(
            f"training cohort mixes tags: body regions {sorted(body_regions)}, "
            f"protocols {sorted(protocols)}"
        )
    return body_regions.pop(), protocols.pop()


def train_model(
    scenes: Sequence[Scene],
    pc1: float = DEFAULT_PC1,
    pc2: float = DEFAULT_PC2,
    s1: int = DEFAULT_S1,
    s2: int = DEFAULT_S2,
) -> StandardizationModel:
    """Learn the standard-scale median from a cohort sharing one protocol.

    Each scene's median is pushed through the linear map sending its
    ``[p1, p2]`` onto ``[s1, s2]``; the mean of the mapped medians, rounded,
    becomes ``mu_s``.  The recorded slope range covers both segment slopes
    of every training scene when subsequently standardized against ``mu_s``.
    """
    if not scenes:
        raise DataError("training requires at least one scene")
    if s1 >= s2:
        raise DataError(f"standard scale requires s1 < s2, got {s1}, {s2}")
    body_region, protocol = _check_cohort_tags(scenes)

    landmarks = []
    mapped = []
    for scene in scenes:
        lm = extract_landmarks(scene, pc1, pc2)
        lm.require_interior_median()
        landmarks.append(lm)
        mapped.append(s1 + (lm.mu - lm.p1) * (s2 - s1) / (lm.p2 - lm.p1))
    mu_s = int(round_half_up(float(np.mean(mapped))))
    mu_s = min(max(mu_s, s1 + 1), s2 - 1)

    slopes = []
    for lm in landmarks:
        slopes.append((mu_s - s1) / (lm.mu - lm.p1))
        slopes.append((s2 - mu_s) / (lm.p2 - lm.mu))
    return StandardizationModel(
        s1=s1,
        s2=s2,
        mu_s=mu_s,
        body_region=body_region,
        protocol=protocol,
        pc1=pc1,
        pc2=pc2,
        training_slope_range=(float(min(slopes)), float(max(slopes))),
    )


def standardize_scene(scene: Scene, model: StandardizationModel) -> Scene:
    """Map a scene onto the model's standard scale.

    Two linear segments send ``[p1, mu]`` onto ``[s1, mu_s]`` and
    ``[mu, p2]`` onto ``[mu_s, s2]``; intensities outside ``[p1, p2]`` clamp
    to the scale ends and background stays 0.
    """
    if scene.protocol != model.protocol or scene.body_region != model.body_region:
        raise ProtocolMismatchError(
            f"scene tagged ({scene.body_region}, {scene.protocol}) does not match "
            f"model ({model.body_region}, {model.protocol})"
        )
    lm = extract_landmarks(scene, model.pc1, model.pc2)
    lm.require_interior_median()

    f = scene.values.astype(np.float64)
    lower_slope = (model.mu_s - model.s1) / (lm.mu - lm.p1)
    upper_slope = (model.s2 - model.mu_s) / (lm.p2 - lm.mu)
    lower = model.s1 + (f - lm.p1) * lower_slope
    upper = model.mu_s + (f - lm.mu) * upper_slope
    mapped = np.where(f <= lm.mu, lower, upper)
    mapped = np.clip(mapped, model.s1, model.s2)
    out = round_half_up(mapped)
    out[scene.values == 0] = 0
    return scene.with_values(out, intensity_ceiling=max(model.s2, int(out.max())))


def sample_slopes(level: NonStandardnessLevel, seed: int) -> tuple[float, float]:
    """Draw (m1, m2) independently and uniformly from the level's band.

    Counter-based generator keyed by ``seed``: the draw depends only on the
    seed value, never on call order.  Clean levels always return (1, 1).
    """
    if level.is_clean:
        return 1.0, 1.0
    rng = np.random.Generator(np.random.Philox(key=seed))
    lo, hi = level.slope_range
    m1 = float(rng.uniform(lo, hi))
    m2 = float(rng.uniform(lo, hi))
    return m1, m2


def apply_inverse_mapping(scene: Scene, m1: float, m2: float) -> Scene:
    """Walk the standardization transfer function backwards with given slopes.

    The scene's own foreground median serves as the standard-scale median.
    Below it intensities divide by ``m1``; above it the excess divides by
    ``m2`` and lands on the relocated median ``mu = nearest(mu_s / m1)``,
    which makes the two branches continuous at the junction.  Background 0
    is preserved; results are clamped to the u16 payload range, and the
    output scene carries the u16 ceiling since slopes below 1 expand the
    scale beyond the standard range.
    """
    if m1 <= 0 or m2 <= 0:
        raise DataError(f"slopes must be positive, got m1={m1}, m2={m2}")
    hist = foreground_histogram(scene)
    mu_s = percentile_intensity(hist, 50.0)
    mu = round_half_up(mu_s / m1)

    f = scene.values.astype(np.float64)
    lower = f / m1
    upper = (f - mu_s) / m2 + mu
    mapped = np.where(f <= mu_s, lower, upper)
    out = round_half_up(mapped)
    np.clip(out, 0, U16_MAX, out=out)
    out[scene.values == 0] = 0
    return scene.with_values(out, intensity_ceiling=U16_MAX)


def inject_nonstandardness(scene: Scene, level: NonStandardnessLevel, seed: int) -> Scene:
    """Apply one level of artificial non-standardness to a standardized scene."""
    if level.is_clean:
        return scene
    m1, m2 = sample_slopes(level, seed)
    return apply_inverse_mapping(scene, m1, m2)


def save_model(model: StandardizationModel, path: str | Path) -> None:
    payload = {
        "s1": model.s1,
        "s2": model.s2,
        "mu_s": model.mu_s,
        "body_region": model.body_region,
        "protocol": model.protocol,
        "pc1": model.pc1,
        "pc2": model.pc2,
        "training_slope_min": model.training_slope_range[0],
        "training_slope_max": model.training_slope_range[1],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_model(path: str | Path) -> StandardizationModel:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing model file {p}")
    try:
        payload = json.loads(p.read_text())
        return StandardizationModel(
            s1=int(payload["s1"]),
            s2=int(payload["s2"]),
            mu_s=int(payload["mu_s"]),
            body_region=str(payload["body_region"]),
            protocol=str(payload["protocol"]),
            pc1=float(payload["pc1"]),
            pc2=float(payload["pc2"]),
            training_slope_range=(
                float(payload["training_slope_min"]),
                float(payload["training_slope_max"]),
            ),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file {p}: {exc}") from exc
