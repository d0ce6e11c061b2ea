from __future__ import annotations

import csv
import io
import math
import random
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zpdseq.analysis import (
    FilterConfig,
    GroupLabel,
    bonferroni,
    filter_records,
    guessing_rate,
    load_groups,
    mann_whitney_u,
    pearson_r,
    run_report,
    total_time_spent,
    tts_histogram,
)

from conftest import make_record


def recs(tts_values, student="s1", cfa=True):
    return [
        make_record(student, f"e{i:03d}", ts=i, cfa=cfa, tts=t)
        for i, t in enumerate(tts_values)
    ]


class TestFilterRecords:
    def test_outlier_above_threshold(self):
        kept, guesses, outliers = filter_records(recs([1600.0]))
        assert [r.time_to_success for r in outliers] == [1600.0]
        assert not kept and not guesses

    def test_guess_below_threshold(self):
        kept, guesses, outliers = filter_records(recs([2.0]))
        assert [r.time_to_success for r in guesses] == [2.0]

    def test_boundaries_are_kept(self):
        kept, guesses, outliers = filter_records(recs([2.1, 1500.0]))
        assert len(kept) == 2 and not guesses and not outliers

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            FilterConfig(guess_threshold_sec=100, outlier_threshold_sec=50)

    @given(
        st.lists(st.floats(min_value=0.1, max_value=3000, allow_nan=False), max_size=50)
    )
    @settings(max_examples=60)
    def test_partition_exhaustive_and_disjoint(self, values):
        events = recs(values)
        kept, guesses, outliers = filter_records(events)
        assert len(kept) + len(guesses) + len(outliers) == len(events)
        ids = lambda rs: {id(r) for r in rs}
        assert not ids(kept) & ids(guesses)
        assert not ids(kept) & ids(outliers)
        assert not ids(guesses) & ids(outliers)

    def test_synthetic_outlier_fraction(self):
        # Generator wired for a 0.13% distraction rate; the filter must
        # recover approximately that fraction.
        from zpdseq.simulator import CohortConfig, generate_cohort, make_curriculum

        cur = make_curriculum(100, seed=3, bonus_fraction=0.0)
        events, _ = generate_cohort(300, cur, rng_seed=12, config=CohortConfig())
        _, _, outliers = filter_records(events)
        fraction = len(outliers) / len(events)
        assert 0.0005 < fraction < 0.0025


class TestTotalTime:
    def test_sum_with_outlier_excluded(self):
        assert total_time_spent(recs([100.0, 200.0, 1600.0])) == 300.0

    def test_empty(self):
        assert total_time_spent([]) == 0.0

    def test_guesses_count_toward_total(self):
        assert total_time_spent(recs([1.0, 50.0])) == 51.0


class TestGuessingRate:
    def test_ratio(self):
        values = [1.0, 1.5] + [30.0] * 8
        assert guessing_rate(recs(values)) == pytest.approx(0.2)

    def test_no_guesses(self):
        assert guessing_rate(recs([30.0, 40.0])) == 0.0

    def test_empty_is_absent(self):
        assert guessing_rate([]) is None
        assert guessing_rate(recs([2000.0])) is None  # only outliers

    def test_constructed_rate_difference_recovered(self):
        # Two cohorts whose guess propensity differs by 25% by construction.
        from zpdseq.simulator import CohortConfig, generate_cohort, make_curriculum

        cur = make_curriculum(80, seed=3, bonus_fraction=0.0)
        base = CohortConfig(guess_range=(0.08, 0.08), distraction_rate=0.0)
        lower = CohortConfig(guess_range=(0.06, 0.06), distraction_rate=0.0)
        ev_a, _ = generate_cohort(150, cur, rng_seed=1, config=base)
        ev_b, _ = generate_cohort(150, cur, rng_seed=2, config=lower)
        rate_a = guessing_rate(ev_a)
        rate_b = guessing_rate(ev_b)
        assert rate_b / rate_a == pytest.approx(0.75, abs=0.06)


def oracle_u(a, b):
    u = 0.0
    for x in a:
        for y in b:
            u += 1.0 if x > y else (0.5 if x == y else 0.0)
    return u


def oracle_exact_p(a, b):
    """Independent enumeration of the label-permutation null."""
    combined = list(a) + list(b)
    n, m = len(a), len(b)
    nm = n * m
    u_obs = min(oracle_u(a, b), nm - oracle_u(a, b))
    hits = total = 0
    for subset in combinations(range(n + m), n):
        chosen = set(subset)
        ga = [combined[i] for i in subset]
        gb = [combined[i] for i in range(n + m) if i not in chosen]
        u = min(oracle_u(ga, gb), nm - oracle_u(ga, gb))
        total += 1
        hits += 1 if u <= u_obs + 1e-9 else 0
    return hits / total


class TestMannWhitney:
    def test_complete_separation(self):
        result = mann_whitney_u([1, 2], [3, 4])
        assert result.u_statistic == 0.0

    def test_interleaved_pair_count(self):
        result = mann_whitney_u([1, 3], [2, 4])
        assert result.u_statistic == 1.0

    def test_identical_samples_no_effect(self):
        result = mann_whitney_u([5, 6, 7], [5, 6, 7])
        assert result.p_value_raw >= 0.95

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])

    def test_symmetry_under_min_convention(self):
        rng = random.Random(5)
        a = [rng.uniform(0, 10) for _ in range(9)]
        b = [rng.uniform(2, 12) for _ in range(7)]
        r1 = mann_whitney_u(a, b)
        r2 = mann_whitney_u(b, a)
        assert r1.u_statistic == r2.u_statistic
        assert r1.p_value_raw == r2.p_value_raw

    @given(
        st.lists(st.floats(min_value=0, max_value=100, allow_nan=False), min_size=1, max_size=8),
        st.lists(st.floats(min_value=0, max_value=100, allow_nan=False), min_size=1, max_size=8),
    )
    @settings(max_examples=60, deadline=None)
    def test_u_sum_identity(self, a, b):
        u_a = oracle_u(a, b)
        u_b = oracle_u(b, a)
        assert u_a + u_b == pytest.approx(len(a) * len(b))
        assert mann_whitney_u(a, b).u_statistic == pytest.approx(min(u_a, u_b))

    def test_exact_p_matches_enumeration_small_tiefree(self):
        rng = random.Random(11)
        for n, m in [(2, 3), (4, 4), (5, 3), (6, 6), (7, 5)]:
            a = [round(rng.uniform(0, 100), 6) for _ in range(n)]
            b = [round(rng.uniform(0, 100), 6) for _ in range(m)]
            result = mann_whitney_u(a, b)
            assert result.method == "exact"
            assert result.p_value_raw == pytest.approx(oracle_exact_p(a, b), abs=1e-9)

    def test_tied_small_samples_use_enumeration(self):
        a = [1, 2, 2, 5]
        b = [2, 3, 5]
        result = mann_whitney_u(a, b)
        assert result.method == "enumeration"
        assert result.p_value_raw == pytest.approx(oracle_exact_p(a, b), abs=1e-9)

    def test_exact_close_to_normal_approx_for_moderate_n(self):
        rng = random.Random(3)
        for trial in range(5):
            a = [rng.uniform(0, 10) for _ in range(10)]
            b = [rng.uniform(1, 11) for _ in range(12)]
            exact = mann_whitney_u(a, b, method="exact").p_value_raw
            approx = mann_whitney_u(a, b, method="approx").p_value_raw
            assert abs(exact - approx) <= 0.02

    def test_large_samples_route_to_approx(self):
        rng = random.Random(9)
        a = [rng.uniform(0, 10) for _ in range(30)]
        b = [rng.uniform(0, 10) for _ in range(30)]
        assert mann_whitney_u(a, b).method == "approx"


class TestBonferroni:
    def test_single_test_unchanged(self):
        assert bonferroni([0.01]) == [0.01]

    def test_multiplies_by_family_size(self):
        assert bonferroni([0.01, 0.02, 0.03, 0.04]) == pytest.approx(
            [0.04, 0.08, 0.12, 0.16]
        )

    def test_caps_at_one(self):
        assert bonferroni([0.5, 0.9]) == [1.0, 1.0]

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            bonferroni([1.2])

    @given(st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=8))
    @settings(max_examples=50)
    def test_monotone_and_idempotent_under_recap(self, ps):
        corrected = bonferroni(ps)
        assert all(c >= p for c, p in zip(corrected, ps))
        assert [min(1.0, c) for c in corrected] == corrected


class TestPearson:
    def test_perfect_linear(self):
        x = [1.0, 2.0, 3.0, 4.0]
        assert pearson_r(x, [2 * v + 1 for v in x]) == pytest.approx(1.0)

    def test_perfect_negative(self):
        x = [1.0, 2.0, 3.0]
        assert pearson_r(x, [-v for v in x]) == pytest.approx(-1.0)

    def test_matches_direct_formula(self):
        # Oracle: covariance over std product, computed longhand.
        rng = random.Random(17)
        x = [rng.uniform(-5, 5) for _ in range(10)]
        y = [rng.uniform(-5, 5) for _ in range(10)]
        mx = sum(x) / 10
        my = sum(y) / 10
        cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
        sx = math.sqrt(sum((a - mx) ** 2 for a in x))
        sy = math.sqrt(sum((b - my) ** 2 for b in y))
        assert pearson_r(x, y) == pytest.approx(cov / (sx * sy), abs=1e-12)

    def test_zero_variance_flagged_undefined(self):
        assert math.isnan(pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson_r([1, 2], [1, 2, 3])


class TestReport:
    @staticmethod
    def two_school_events():
        rng = random.Random(23)
        events = []
        groups = {}
        for school in ("sch1", "sch2"):
            for condition, shift in (("adaptive", 0.0), ("baseline", 10.0)):
                for k in range(8):
                    sid = f"{school}-{condition}-{k}"
                    groups[sid] = GroupLabel(school=school, condition=condition)
                    for e in range(15):
                        events.append(
                            make_record(
                                sid, f"e{e:03d}", ts=e,
                                cfa=rng.random() < 0.7,
                                tts=rng.uniform(10, 60) + shift,
                            )
                        )
        return events, groups

    def test_two_school_tables(self, tmp_path):
        events, groups = self.two_school_events()
        paths = run_report(events, groups, FilterConfig(), tmp_path)
        with open(paths["total_time"]) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["school"] for r in rows] == ["sch1", "sch2"]
        for row in rows:
            assert float(row["p_corrected"]) >= float(row["p_raw"])
            assert int(row["n_adaptive"]) == 8 and int(row["n_baseline"]) == 8

    def test_empty_events_header_only(self, tmp_path):
        paths = run_report([], {}, FilterConfig(), tmp_path)
        for name in ("total_time", "tts_median", "cfa_rate", "guessing_rate"):
            content = paths[name].read_text().strip().splitlines()
            assert len(content) == 1  # header only

    def test_histogram_matches_second_binning_pass(self, tmp_path):
        # Oracle: an independent binning implementation over the same data.
        events, groups = self.two_school_events()
        bins = tts_histogram(events, n_bins=20)
        values = [r.time_to_success for r in events]
        hi = max(values)
        counts = [0] * 20
        width = hi / 20
        for v in values:
            b = min(int(v / width), 19)
            counts[b] += 1
        assert [c for _, _, c in bins] == counts
        assert sum(c for _, _, c in bins) == len(events)

    def test_marker_file_carries_thresholds(self, tmp_path):
        events, groups = self.two_school_events()
        cfg = FilterConfig(guess_threshold_sec=2.1, outlier_threshold_sec=1500)
        paths = run_report(events, groups, cfg, tmp_path)
        with open(paths["tts_histogram_markers"]) as fh:
            row = next(csv.DictReader(fh))
        assert float(row["guess_threshold_sec"]) == 2.1
        assert float(row["outlier_threshold_sec"]) == 1500.0

    def test_load_groups(self):
        text = "student_id,school,condition\ns1,sch1,adaptive\ns2,sch1,baseline\n"
        groups = load_groups(io.BytesIO(text.encode()))
        assert groups["s1"] == GroupLabel(school="sch1", condition="adaptive")

    def test_load_groups_missing_columns(self):
        with pytest.raises(ValueError, match="columns"):
            load_groups(io.BytesIO(b"student_id,cohort\ns1,x\n"))
