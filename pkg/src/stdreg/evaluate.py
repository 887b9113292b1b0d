"""Accuracy and consistency evaluation: paired t-tests, win/loss counting,
and the goodness metric.

For every (non-standardness level, deformation cell) the paired corner-RMSE
samples of the non-standard arm and the standardized arm are compared with
a two-tailed paired t-test.  Outcomes are counted per deformation group as
wins / losses / non-significant for the non-standard arm, normalized to the
unit win-loss triangle, and condensed into a goodness ratio

    gamma = sqrt(((1 - L_x)^2 + W_x^2) / ((1 - W_x)^2 + L_x^2)),

the distance to the all-loss corner over the distance to the all-win
corner.  ``gamma < 1`` means the standardized arm registers better.

The Student-t tail probability is computed from the regularized incomplete
beta function (continued-fraction evaluation) so p-values carry no
dependency on an external statistics library and are bit-reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .scene import BoundingBox
from .transform import AffineParams, rmse_corners

GROUP_COLUMNS = ("small", "medium", "large", "total")
LEVEL_ORDER = ("psibar1", "psibar2", "psibar3", "psibar4", "psibar5", "psibar6", "psibar7")

# Continued-fraction evaluation constants (double precision targets).
_CF_MAX_ITERATIONS = 300
_CF_EPS = 3.0e-16
_CF_TINY = 1.0e-300


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Modified Lentz evaluation of the incomplete-beta continued fraction."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITERATIONS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise DataError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise DataError(f"beta parameters must be positive, got a={a}, b={b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise DataError(f"degrees of freedom must be >= 1, got {df}")
    if not math.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


class Outcome(str, Enum):
    NS_WINS = "ns_wins"
    NS_LOSES = "ns_loses"
    NO_DIFFERENCE = "no_difference"


@dataclass(frozen=True)
class PairedSample:
    """Paired corner-RMSE samples for the standardized / non-standard arms."""

    rmse_s: tuple[float, ...]
    rmse_ns: tuple[float, ...]

    def __post_init__(self):
        if len(self.rmse_s) != len(self.rmse_ns):
            raise DataError("paired sample arms differ in length")
        if len(self.rmse_s) < 2:
            raise DataError("paired sample needs at least 2 pairs")
        if any(v < 0 for v in self.rmse_s + self.rmse_ns):
            raise DataError("RMSE values must be non-negative")

    def differences(self) -> np.ndarray:
        return np.asarray(self.rmse_ns, dtype=np.float64) - np.asarray(
            self.rmse_s, dtype=np.float64
        )


def paired_t_statistics(diffs: np.ndarray) -> tuple[float, float]:
    """(t, two-tailed p) for mean(diffs) = 0; degenerate zero-variance
    samples collapse to p = 0 with t = +/-inf (or p = 1 when all-zero)."""
    n = len(diffs)
    if n < 2:
        raise DataError("t statistic needs at least 2 pairs")
    mean = float(np.mean(diffs))
    sd = float(np.std(diffs, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return t, student_t_two_tailed_p(t, n - 1)


def paired_t_test(sample: PairedSample, alpha: float = 0.05) -> Outcome:
    """Two-tailed paired t-test of the ns arm against the s arm.

    Smaller RMSE is better, so a significantly negative mean difference
    (ns - s) means the non-standard arm wins.
    """
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must lie in (0, 1), got {alpha}")
    diffs = sample.differences()
    t, p = paired_t_statistics(diffs)
    mean = float(np.mean(diffs))
    if p <= alpha and mean < 0:
        return Outcome.NS_WINS
    if p <= alpha and mean > 0:
        return Outcome.NS_LOSES
    return Outcome.NO_DIFFERENCE


@dataclass(frozen=True)
class WinLossRecord:
    w: int
    l: int
    n: int

    def __post_init__(self):
        if min(self.w, self.l, self.n) < 0:
            raise DataError("win/loss/no-difference counts must be non-negative")

    @property
    def total(self) -> int:
        return self.w + self.l + self.n

    @property
    def w_x(self) -> float:
        return self.w / self.total

    @property
    def l_x(self) -> float:
        return self.l / self.total


def goodness(record: WinLossRecord) -> float:
    """Goodness ratio of a win/loss configuration; +inf at the all-win corner."""
    if record.total < 1:
        raise DataError("goodness needs at least one counted outcome")
    w_x = record.w_x
    l_x = record.l_x
    denom = (1.0 - w_x) ** 2 + l_x**2
    numer = (1.0 - l_x) ** 2 + w_x**2
    if denom == 0.0:
        return math.inf
    return math.sqrt(numer / denom)


@dataclass(frozen=True)
class GoodnessCell:
    level_id: str
    group: str
    record: WinLossRecord
    gamma: float


@dataclass(frozen=True)
class CellTest:
    level_id: str
    cell_id: str
    group: str
    n_pairs: int
    t: float
    p: float
    outcome: Outcome
    rmse_s: tuple[float, ...]
    rmse_ns: tuple[float, ...]


@dataclass
class GoodnessReport:
    """Level x deformation-group goodness table plus per-cell test details."""

    kind: str
    levels: list[str]
    table: dict[tuple[str, str], GoodnessCell]
    details: list[CellTest]
    gaps: list[str]
    excluded: int

    def gamma(self, level_id: str, group: str) -> float | None:
        cell = self.table.get((level_id, group))
        return cell.gamma if cell else None

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", *GROUP_COLUMNS])
            for level in self.levels:
                row = [level]
                for group in GROUP_COLUMNS:
                    g = self.gamma(level, group)
                    if g is None:
                        row.append("")
                    elif math.isinf(g):
                        row.append("inf")
                    else:
                        row.append(f"{g:.6f}")
                writer.writerow(row)

    def to_json(self, path: str | Path) -> None:
        def _num(v: float) -> float | str:
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else "-inf"
            return v

        payload = {
            "kind": self.kind,
            "levels": self.levels,
            "table": {
                f"{level}/{group}": {
                    "w": cell.record.w,
                    "l": cell.record.l,
                    "n": cell.record.n,
                    "W_x": cell.record.w_x,
                    "L_x": cell.record.l_x,
                    "gamma": _num(cell.gamma),
                }
                for (level, group), cell in sorted(self.table.items())
            },
            "cells": [
                {
                    "level": d.level_id,
                    "cell": d.cell_id,
                    "group": d.group,
                    "n_pairs": d.n_pairs,
                    "t": _num(d.t),
                    "p": _num(d.p),
                    "outcome": d.outcome.value,
                    "rmse_s": list(d.rmse_s),
                    "rmse_ns": list(d.rmse_ns),
                }
                for d in self.details
            ],
            "gaps": self.gaps,
            "excluded": self.excluded,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _ordered_levels(results) -> list[str]:
    present = {r.level_id for r in results if r.level_id != "clean"}
    return [lv for lv in LEVEL_ORDER if lv in present] + sorted(
        lv for lv in present if lv not in LEVEL_ORDER
    )


def _build_report(
    kind: str,
    pairs_by_cell: Mapping[tuple[str, str, str], tuple[list[float], list[float]]],
    levels: list[str],
    gaps: list[str],
    excluded: int,
    alpha: float,
) -> GoodnessReport:
    details: list[CellTest] = []
    counts: dict[tuple[str, str], dict[Outcome, int]] = {}
    for (level, cell_id, group), (rs, rns) in sorted(pairs_by_cell.items()):
        if len(rs) < 2:
            gaps.append(f"{kind}:{level}/{cell_id}: only {len(rs)} usable pair(s)")
            continue
        sample = PairedSample(rmse_s=tuple(rs), rmse_ns=tuple(rns))
        t, p = paired_t_statistics(sample.differences())
        outcome = paired_t_test(sample, alpha)
        details.append(
            CellTest(
                level_id=level,
                cell_id=cell_id,
                group=group,
                n_pairs=len(rs),
                t=t,
                p=p,
                outcome=outcome,
                rmse_s=tuple(rs),
                rmse_ns=tuple(rns),
            )
        )
        for key in ((level, group), (level, "total")):
            bucket = counts.setdefault(
                key,
                {Outcome.NS_WINS: 0, Outcome.NS_LOSES: 0, Outcome.NO_DIFFERENCE: 0},
            )
            bucket[outcome] += 1

    table: dict[tuple[str, str], GoodnessCell] = {}
    for (level, group), bucket in counts.items():
        record = WinLossRecord(
            w=bucket[Outcome.NS_WINS],
            l=bucket[Outcome.NS_LOSES],
            n=bucket[Outcome.NO_DIFFERENCE],
        )
        table[(level, group)] = GoodnessCell(
            level_id=level, group=group, record=record, gamma=goodness(record)
        )
    return GoodnessReport(
        kind=kind,
        levels=levels,
        table=table,
        details=details,
        gaps=gaps,
        excluded=excluded,
    )


def accuracy_report(results: Iterable, alpha: float = 0.05) -> GoodnessReport:
    """Goodness table comparing both arms against the known truth.

    ``results`` are experiment cell records carrying ``subject``,
    ``protocol``, ``level_id``, ``cell_id``, ``group``, ``status``, and the
    two truth-relative corner RMSE values.  For each (level, deformation
    cell) the paired sample pools subjects and protocols.
    """
    records = [r for r in results if r.level_id != "clean"]
    levels = _ordered_levels(records)
    gaps: list[str] = []
    excluded = 0
    grouped: dict[tuple[str, str, str], tuple[list[float], list[float]]] = {}
    for r in sorted(records, key=lambda r: (r.level_id, r.cell_id, r.subject, r.protocol)):
        if r.status != "ok" or r.rmse_s is None or r.rmse_ns is None:
            excluded += 1
            continue
        rs, rns = grouped.setdefault((r.level_id, r.cell_id, r.group), ([], []))
        rs.append(r.rmse_s)
        rns.append(r.rmse_ns)
    if not grouped:
        raise DataError("no usable experiment cells for the accuracy report")
    return _build_report("accuracy", grouped, levels, gaps, excluded, alpha)


def consistency_report(
    results: Iterable,
    geometries: Mapping[int, tuple[BoundingBox, tuple[float, float, float], tuple[float, float, float]]],
    alpha: float = 0.05,
) -> GoodnessReport:
    """Goodness table comparing cross-protocol agreement of the two arms.

    For each subject whose two protocol scenes are co-registered by
    construction, the transforms recovered independently from both protocols
    should agree; their corner RMSE over the subject's shared bounding box
    measures inconsistency.  Pairs are formed per (level, deformation cell)
    across subjects.
    """
    records = [r for r in results if r.level_id != "clean"]
    levels = _ordered_levels(records)
    gaps: list[str] = []
    excluded = 0

    by_key: dict[tuple[str, str, str, int], dict[str, object]] = {}
    for r in records:
        if r.status != "ok" or r.params_s is None or r.params_ns is None:
            excluded += 1
            continue
        by_key.setdefault((r.level_id, r.cell_id, r.group, r.subject), {})[r.protocol] = r

    grouped: dict[tuple[str, str, str], tuple[list[float], list[float]]] = {}
    for (level, cell_id, group, subject), per_protocol in sorted(
        by_key.items(), key=lambda kv: kv[0]
    ):
        if len(per_protocol) != 2:
            gaps.append(f"consistency:{level}/{cell_id}/subject{subject}: unpaired protocols")
            continue
        if subject not in geometries:
            raise DataError(f"missing geometry record for subject {subject}")
        box, voxel_size, center = geometries[subject]
        (proto_a, rec_a), (proto_b, rec_b) = sorted(per_protocol.items())
        rmse_s_cons = rmse_corners(rec_a.params_s, rec_b.params_s, box, voxel_size, center)
        rmse_ns_cons = rmse_corners(rec_a.params_ns, rec_b.params_ns, box, voxel_size, center)
        rs, rns = grouped.setdefault((level, cell_id, group), ([], []))
        rs.append(rmse_s_cons)
        rns.append(rmse_ns_cons)
    if not grouped:
        raise DataError("no pairable protocol results for the consistency report")
    return _build_report("consistency", grouped, levels, gaps, excluded, alpha)
