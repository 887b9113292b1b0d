"""Evaluation tests: t statistics against a quadrature oracle, goodness
arithmetic against direct computation, and report construction."""

import math

import numpy as np
import pytest

from stdreg.errors import DataError
from stdreg.evaluate import (
    CellTest,
    GoodnessReport,
    PairedSample,
    Outcome,
    WinLossRecord,
    accuracy_report,
    consistency_report,
    goodness,
    paired_t_statistics,
    paired_t_test,
    regularized_incomplete_beta,
    student_t_two_tailed_p,
)
from stdreg.pipeline import ExperimentCell
from stdreg.scene import BoundingBox
from stdreg.transform import AffineParams


def t_pdf(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def two_tailed_p_oracle(t, df, n_steps=50001):
    """Simpson quadrature of the t density over [0, |t|]; p = 1 - 2 F."""
    t = abs(t)
    if t == 0:
        return 1.0
    xs = np.linspace(0.0, t, n_steps)
    ys = np.array([t_pdf(x, df) for x in xs])
    h = xs[1] - xs[0]
    integral = (h / 3) * (ys[0] + ys[-1] + 4 * ys[1:-1:2].sum() + 2 * ys[2:-1:2].sum())
    return 1.0 - 2.0 * integral


def gamma_oracle(w, l, n):
    total = w + l + n
    wx, lx = w / total, l / total
    denom = (1 - wx) ** 2 + lx**2
    if denom == 0:
        return math.inf
    return math.sqrt(((1 - lx) ** 2 + wx**2) / denom)


class TestStudentT:
    # Two-tailed critical values from a standard reference table.
    TABLE = [
        (9, 2.262, 0.05),
        (9, 1.833, 0.10),
        (9, 3.250, 0.01),
        (19, 2.093, 0.05),
        (19, 1.729, 0.10),
        (19, 2.861, 0.01),
    ]

    @pytest.mark.parametrize("df,t,p", TABLE)
    def test_reference_table(self, df, t, p):
        assert student_t_two_tailed_p(t, df) == pytest.approx(p, abs=3e-4)

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            df = int(rng.choice([9, 19]))
            t = float(rng.uniform(-6, 6))
            assert student_t_two_tailed_p(t, df) == pytest.approx(
                two_tailed_p_oracle(t, df), abs=1e-6
            )

    def test_limits(self):
        assert student_t_two_tailed_p(0.0, 9) == pytest.approx(1.0)
        assert student_t_two_tailed_p(math.inf, 9) == 0.0

    def test_incomplete_beta_basics(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
        # I_x(1, 1) = x
        for x in (0.1, 0.5, 0.9):
            assert regularized_incomplete_beta(1.0, 1.0, x) == pytest.approx(x, abs=1e-14)
        # symmetry: I_x(a, b) = 1 - I_{1-x}(b, a)
        assert regularized_incomplete_beta(4.5, 0.5, 0.3) == pytest.approx(
            1.0 - regularized_incomplete_beta(0.5, 4.5, 0.7), abs=1e-13
        )


class TestPairedTTest:
    def sample(self, s, ns):
        return PairedSample(rmse_s=tuple(s), rmse_ns=tuple(ns))

    def test_identical_lists_no_difference(self):
        s = [1.0, 2.0, 3.0, 4.0]
        assert paired_t_test(self.sample(s, s)) is Outcome.NO_DIFFERENCE

    def test_constant_negative_difference_wins(self):
        s = [2.0, 2.0, 2.0, 2.0, 2.0]
        ns = [1.0, 1.0, 1.0, 1.0, 1.0]
        assert paired_t_test(self.sample(s, ns)) is Outcome.NS_WINS

    def test_known_difference_list(self):
        d = [1.0, 1.2, 0.8, 1.1, 0.9, 1.0, 1.3, 0.7, 1.05, 0.95]
        s = [5.0] * 10
        ns = [5.0 + v for v in d]
        t, p = paired_t_statistics(np.asarray(d))
        # direct-formula oracle
        mean = np.mean(d)
        sd = np.std(d, ddof=1)
        t_oracle = mean / (sd / math.sqrt(len(d)))
        assert t == pytest.approx(t_oracle, rel=1e-12)
        assert p == pytest.approx(two_tailed_p_oracle(t_oracle, 9), abs=1e-9)
        assert p < 1e-6
        assert paired_t_test(self.sample(s, ns)) is Outcome.NS_LOSES

    def test_swap_flips_outcome(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            s = tuple(rng.uniform(0, 5, 8))
            ns = tuple(rng.uniform(0, 5, 8))
            fwd = paired_t_test(self.sample(s, ns))
            rev = paired_t_test(self.sample(ns, s))
            flip = {
                Outcome.NS_WINS: Outcome.NS_LOSES,
                Outcome.NS_LOSES: Outcome.NS_WINS,
                Outcome.NO_DIFFERENCE: Outcome.NO_DIFFERENCE,
            }
            assert rev is flip[fwd]

    def test_too_few_pairs_rejected(self):
        with pytest.raises(DataError):
            PairedSample(rmse_s=(1.0,), rmse_ns=(2.0,))

    def test_negative_rmse_rejected(self):
        with pytest.raises(DataError):
            PairedSample(rmse_s=(1.0, -0.5), rmse_ns=(1.0, 1.0))


class TestGoodness:
    def test_symmetric_configurations_are_one(self):
        for w, l, n in [(0, 0, 5), (3, 3, 4), (2, 2, 0)]:
            assert goodness(WinLossRecord(w, l, n)) == pytest.approx(1.0, abs=1e-15)

    def test_hand_arithmetic(self):
        got = goodness(WinLossRecord(5, 3, 2))
        assert got == pytest.approx(math.sqrt(0.74 / 0.34), rel=1e-15)

    def test_all_wins_is_infinite(self):
        assert math.isinf(goodness(WinLossRecord(4, 0, 0)))

    def test_matches_oracle_on_random_triples(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            w, l, n = (int(v) for v in rng.integers(0, 30, 3))
            if w + l + n == 0:
                n = 1
            got = goodness(WinLossRecord(w, l, n))
            want = gamma_oracle(w, l, n)
            if math.isinf(want):
                assert math.isinf(got)
            else:
                assert got == pytest.approx(want, abs=1e-12)

    def test_swapping_wins_losses_inverts(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            w, l, n = (int(v) for v in rng.integers(0, 20, 3))
            if w + l + n == 0 or (l == max(w, l) and w == 0 and l == 0):
                n = max(n, 1)
            fwd = goodness(WinLossRecord(w, l, n))
            rev = goodness(WinLossRecord(l, w, n))
            if math.isinf(fwd):
                assert rev == 0.0
            elif fwd == 0.0:
                assert math.isinf(rev)
            else:
                assert fwd * rev == pytest.approx(1.0, rel=1e-12)

    def test_monotone_in_fractions(self):
        # gamma grows with the win fraction and shrinks with the loss fraction
        total = 200
        for l in range(0, 60, 7):
            values = [
                goodness(WinLossRecord(w, l, total - w - l)) for w in range(0, 120, 10)
            ]
            finite = [v for v in values if math.isfinite(v)]
            assert all(b > a for a, b in zip(finite, finite[1:]))
        for w in range(0, 60, 7):
            values = [
                goodness(WinLossRecord(w, l, total - w - l)) for l in range(0, 120, 10)
            ]
            finite = [v for v in values if math.isfinite(v)]
            assert all(b < a for a, b in zip(finite, finite[1:]))

    def test_empty_record_rejected(self):
        with pytest.raises(DataError):
            goodness(WinLossRecord(0, 0, 0))


def make_cells(level_rmses, subjects=5, cells_per_group=2):
    """Synthesize joined experiment cells for report tests.

    ``level_rmses`` maps level id -> (rmse_s_base, rmse_ns_base); per-subject
    jitter keeps t-test variances non-zero.
    """
    groups = ["small", "medium", "large"]
    out = []
    rng = np.random.default_rng(0)
    for level_id, (base_s, base_ns) in level_rmses.items():
        for group in groups:
            for idx in range(cells_per_group):
                cell_id = f"{group}{idx}"
                for subject in range(subjects):
                    for protocol in ("T2", "PD"):
                        jitter = rng.normal(0, 0.01)
                        out.append(
                            ExperimentCell(
                                subject=subject,
                                protocol=protocol,
                                level_id=level_id,
                                cell_id=cell_id,
                                group=group,
                                truth=AffineParams(),
                                slopes=(1.0, 1.0),
                                params_s=AffineParams(),
                                params_ns=AffineParams(),
                                rmse_s=abs(base_s + jitter),
                                rmse_ns=abs(base_ns + jitter + rng.normal(0, 0.01)),
                                status="ok",
                            )
                        )
    return out


LEVELS7 = ["psibar1", "psibar2", "psibar3", "psibar4", "psibar5", "psibar6", "psibar7"]


class TestAccuracyReport:
    def test_shape_is_seven_by_four(self):
        cells = make_cells({lv: (1.0, 1.0) for lv in LEVELS7})
        report = accuracy_report(cells)
        assert report.levels == LEVELS7
        for level in LEVELS7:
            for group in ("small", "medium", "large", "total"):
                assert report.gamma(level, group) is not None

    def test_equal_arms_give_unit_gamma(self):
        cells = make_cells({lv: (1.0, 1.0) for lv in LEVELS7})
        report = accuracy_report(cells)
        # arms differ only by symmetric jitter: no significant differences
        for (level, group), cell in report.table.items():
            assert cell.record.n >= cell.record.w + cell.record.l
        assert report.gamma("psibar1", "total") == pytest.approx(1.0, abs=0.35)

    def test_systematically_worse_ns_drives_gamma_below_one(self):
        cells = make_cells({lv: (1.0, 8.0) for lv in LEVELS7})
        report = accuracy_report(cells)
        for level in LEVELS7:
            for group in ("small", "medium", "large", "total"):
                assert report.gamma(level, group) < 1.0

    def test_clean_rows_excluded(self):
        cells = make_cells({"clean": (1.0, 1.0), "psibar1": (1.0, 1.0)})
        report = accuracy_report(cells)
        assert report.levels == ["psibar1"]

    def test_failed_cells_excluded_and_counted(self):
        cells = make_cells({"psibar1": (1.0, 2.0)})
        cells[0].status = "registration_failed"
        cells[0].rmse_ns = None
        report = accuracy_report(cells)
        assert report.excluded == 1

    def test_csv_and_json_shapes(self, tmp_path):
        cells = make_cells({lv: (1.0, 4.0) for lv in LEVELS7})
        report = accuracy_report(cells)
        report.to_csv(tmp_path / "acc.csv")
        lines = (tmp_path / "acc.csv").read_text().strip().splitlines()
        assert lines[0] == "level,small,medium,large,total"
        assert len(lines) == 8  # header + 7 level rows
        assert all(len(line.split(",")) == 5 for line in lines)
        report.to_json(tmp_path / "acc.json")
        import json

        payload = json.loads((tmp_path / "acc.json").read_text())
        assert payload["kind"] == "accuracy"
        assert len(payload["cells"]) == 7 * 6  # levels x (3 groups x 2 cells)
        first = payload["cells"][0]
        assert {"level", "cell", "group", "n_pairs", "t", "p", "outcome",
                "rmse_s", "rmse_ns"} <= set(first)


class TestConsistencyReport:
    def geometries(self, subjects=5):
        box = BoundingBox((4, 4, 4), (40, 40, 40))
        return {s: (box, (1.0, 1.0, 1.0), (23.5, 23.5, 23.5)) for s in range(subjects)}

    def test_identical_protocol_transforms_unit_gamma(self):
        cells = make_cells({lv: (1.0, 1.0) for lv in LEVELS7})
        report = consistency_report(cells, self.geometries())
        # params are identical across protocols in both arms: all RMSE 0
        for detail in report.details:
            assert detail.outcome is Outcome.NO_DIFFERENCE
        for level in LEVELS7:
            assert report.gamma(level, "total") == pytest.approx(1.0)

    def test_sample_length_equals_subject_count(self):
        cells = make_cells({"psibar3": (1.0, 2.0)}, subjects=10)
        report = consistency_report(cells, self.geometries(10))
        assert all(d.n_pairs == 10 for d in report.details)

    def test_divergent_ns_protocols_lose(self):
        cells = make_cells({"psibar5": (1.0, 1.0)}, subjects=6)
        rng = np.random.default_rng(3)
        for cell in cells:
            if cell.protocol == "PD":
                vec = cell.params_ns.to_vector()
                vec[0] += 6.0 + rng.normal(0, 0.5)  # ns arms disagree across protocols
                cell.params_ns = AffineParams.from_vector(vec)
        report = consistency_report(cells, self.geometries(6))
        assert report.gamma("psibar5", "total") < 1.0

    def test_unpaired_protocols_reported_as_gap(self):
        cells = make_cells({"psibar1": (1.0, 2.0)}, subjects=2)
        cells = [c for c in cells if not (c.subject == 0 and c.protocol == "PD")]
        report = consistency_report(cells, self.geometries(2))
        assert any("unpaired" in gap for gap in report.gaps)
