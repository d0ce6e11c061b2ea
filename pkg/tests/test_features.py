from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zpdseq.features import (
    FEATURE_GRID,
    GRID_SIZE,
    StudentHistory,
    build_snapshot,
    build_training_matrix,
    compute_features,
    default_cfa_features,
    default_tts_features,
    descriptor_index,
    enumerate_feature_grid,
    export_feature_grid_csv,
    percentile_rank,
    snapshot_from_json,
    snapshot_to_json,
)

from conftest import make_curriculum, make_record


class TestFeatureGrid:
    def test_exactly_180_descriptors(self):
        assert len(enumerate_feature_grid()) == 180

    def test_deterministic_across_calls(self):
        assert enumerate_feature_grid() == enumerate_feature_grid()

    def test_indices_are_dense_and_ordered(self):
        assert [d.index for d in FEATURE_GRID] == list(range(GRID_SIZE))

    def test_contains_recent_same_type_success_window_1(self):
        # The grid must cover short-window same-type success rates.
        idx = descriptor_index("cfa", "same_type", 1, "mean", "student")
        d = FEATURE_GRID[idx]
        assert (d.metric, d.scope, d.window, d.aggregate, d.subject) == (
            "cfa", "same_type", 1, "mean", "student",
        )

    def test_contains_population_duration_spread_of_target(self):
        idx = descriptor_index("tts", "target_exercise", None, "std", "population")
        assert FEATURE_GRID[idx].subject == "population"

    def test_pruned_cells_absent(self):
        with pytest.raises(KeyError):
            descriptor_index("cfa", "all", 1, "std", "student")
        with pytest.raises(KeyError):
            descriptor_index("cfa", "target_exercise", 5, "mean", "student")
        with pytest.raises(KeyError):
            descriptor_index("cfa", "all", None, "mean", "population")

    def test_csv_export_has_all_rows(self):
        lines = export_feature_grid_csv().strip().splitlines()
        assert len(lines) == GRID_SIZE + 1
        assert lines[0] == "index,metric,scope,window,aggregate,subject"

    def test_default_selections_are_valid_and_distinct(self):
        for sel in (default_cfa_features(), default_tts_features()):
            assert len(sel) == 20
            assert len(set(sel)) == 20
            assert all(0 <= i < GRID_SIZE for i in sel)


class TestPercentileRank:
    def test_midrank_of_median(self):
        assert percentile_rank(3, [1, 2, 3, 4, 5]) == 0.5

    def test_below_all(self):
        assert percentile_rank(0, [1, 2, 3]) == 0.0

    def test_above_all(self):
        assert percentile_rank(9, [1, 2, 3]) == 1.0

    def test_tied_values_get_half_credit(self):
        # Oracle: exhaustive pair counting.
        assert percentile_rank(2, [1, 2, 2, 3]) == (1 + 0.5 * 2) / 4

    def test_empty_base_returns_half(self):
        assert percentile_rank(5, []) == 0.5

    @given(
        st.floats(min_value=-100, max_value=100, allow_nan=False),
        st.lists(st.floats(min_value=-100, max_value=100, allow_nan=False), min_size=1, max_size=30),
    )
    @settings(max_examples=100)
    def test_matches_exhaustive_pair_counting(self, value, base):
        base = sorted(base)
        expected = (
            sum(1.0 for b in base if b < value) + 0.5 * sum(1.0 for b in base if b == value)
        ) / len(base)
        assert percentile_rank(value, base) == pytest.approx(expected, abs=1e-12)

    @given(st.lists(st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=1, max_size=20))
    @settings(max_examples=50)
    def test_monotone_in_value(self, base):
        base = sorted(base)
        probes = sorted([-11.0, 0.0, 3.5, 11.0] + base)
        ranks = [percentile_rank(v, base) for v in probes]
        assert all(a <= b for a, b in zip(ranks, ranks[1:]))


@pytest.fixture
def small_world():
    cur = make_curriculum(
        8,
        per_index={
            0: {"exercise_type": "open"},
            1: {"exercise_type": "multi_choice"},
            2: {"exercise_type": "open"},
            3: {"exercise_type": "multi_choice"},
        },
    )
    events = [
        make_record("s1", "e000", ts=1, cfa=True, tts=10),
        make_record("s1", "e001", ts=2, cfa=True, tts=20),
        make_record("s1", "e002", ts=3, cfa=False, tts=40),
        make_record("s2", "e000", ts=1, cfa=True, tts=12),
        make_record("s2", "e001", ts=2, cfa=False, tts=60),
    ]
    return cur, events


class TestBuildSnapshot:
    def test_per_exercise_mean(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        stats = snap.per_exercise["e000"]
        assert stats.cfa_mean == 1.0
        assert stats.tts_mean == pytest.approx(11.0)
        assert stats.n_observations == 2

    def test_cfa_mean_arithmetic(self):
        cur = make_curriculum(1)
        events = [
            make_record("s1", "e000", ts=1, cfa=True),
            make_record("s2", "e000", ts=1, cfa=True),
            make_record("s3", "e000", ts=1, cfa=False),
            make_record("s4", "e000", ts=1, cfa=True),
        ]
        snap = build_snapshot(events, cur, built_at=0.0)
        assert snap.per_exercise["e000"].cfa_mean == 0.75

    def test_empty_event_list(self, small_world):
        cur, _ = small_world
        snap = build_snapshot([], cur, built_at=0.0)
        assert snap.per_exercise == {}
        assert snap.global_stats.n_observations == 0

    def test_unobserved_exercise_has_no_entry(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        assert "e007" not in snap.per_exercise

    def test_against_naive_groupby_oracle(self):
        # Oracle: independent full-scan aggregation with plain dicts.
        rng = random.Random(7)
        cur = make_curriculum(20)
        events = []
        for s in range(50):
            for e in range(20):
                if rng.random() < 0.8:
                    events.append(
                        make_record(
                            f"s{s}", f"e{e:03d}",
                            ts=rng.uniform(0, 100),
                            cfa=rng.random() < 0.6,
                            tts=rng.uniform(2, 300),
                        )
                    )
        sums: dict[str, list[float]] = {}
        for rec in events:
            sums.setdefault(rec.exercise_id, []).append(rec.time_to_success)
        snap = build_snapshot(events, cur, built_at=0.0)
        for eid, tts_values in sums.items():
            assert snap.per_exercise[eid].tts_mean == pytest.approx(
                sum(tts_values) / len(tts_values), rel=1e-12
            )
            assert snap.per_exercise[eid].n_observations == len(tts_values)

    def test_per_lu_pools_records_across_exercises(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        # e000..e002 share lu0 (three records from s1, two from s2).
        lu = cur.exercises[0].learning_unit
        pooled = [r for r in events if cur.by_id[r.exercise_id].learning_unit == lu]
        expected = sum(1.0 if r.correct_first_attempt else 0.0 for r in pooled) / len(pooled)
        assert snap.per_lu[lu].cfa_mean == pytest.approx(expected)

    def test_rank_base_is_sorted_per_student_stat(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        base = snap.rank_bases["tts|all|3"][""]
        # s1 last-3 mean tts = (10+20+40)/3; s2 = (12+60)/2 (partial window).
        assert base == sorted([70 / 3, 36.0])

    def test_snapshot_json_round_trip(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=123.0, version=4)
        again = snapshot_from_json(snapshot_to_json(snap))
        assert again == snap
        assert snapshot_to_json(again) == snapshot_to_json(snap)


class TestComputeFeatures:
    def test_window_mean_same_type(self, small_world):
        cur, _ = small_world
        snap = build_snapshot([], cur, built_at=0.0)
        history = StudentHistory()
        # Three same-type (open) records with outcomes 1, 0, 1.
        history.append(make_record("s", "e000", cfa=True), cur.by_id["e000"])
        history.append(make_record("s", "e002", cfa=False), cur.by_id["e002"])
        open_ex = cur.by_id["e000"]
        # A later open exercise is the target; add one more open record.
        cur2 = make_curriculum(8, exercise_type="open")
        history2 = StudentHistory()
        for eid, cfa in (("e000", True), ("e001", False), ("e002", True)):
            history2.append(make_record("s", eid, cfa=cfa), cur2.by_id[eid])
        idx = descriptor_index("cfa", "same_type", 3, "mean", "student")
        fv = compute_features(history2, snap, cur2.by_id["e003"], "cfa_model", [idx])
        assert fv.values[0] == pytest.approx(2 / 3)
        assert fv.support_flags[0]

    def test_empty_history_imputes_population_means(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        fv = compute_features(StudentHistory(), snap, cur.exercises[5], "cfa_model", None)
        student_cells = [i for i, d in enumerate(FEATURE_GRID) if d.subject == "student"]
        assert not fv.support_flags[student_cells].any()
        mean_cells = [
            i for i in student_cells
            if FEATURE_GRID[i].aggregate == "mean" and FEATURE_GRID[i].metric == "cfa"
        ]
        for i in mean_cells:
            assert fv.values[i] == pytest.approx(snap.global_stats.cfa_mean)

    def test_cold_population_defaults(self):
        cur = make_curriculum(3)
        snap = build_snapshot([], cur, built_at=0.0)
        fv = compute_features(StudentHistory(), snap, cur.exercises[0], "cfa_model", None)
        by = {FEATURE_GRID[i]: v for i, v in enumerate(fv.values)}
        for d, v in by.items():
            if d.aggregate == "mean" and d.metric == "cfa":
                assert v == 0.5
            if d.aggregate == "mean" and d.metric == "tts":
                assert v == 60.0
            if d.aggregate == "percentile_rank":
                assert v == 0.5
            if d.aggregate == "std":
                assert v == 0.0
        assert not fv.support_flags.any()

    def test_smallest_tts_in_population_ranks_zero(self):
        # Oracle: sort the five per-student stats and read the position.
        cur = make_curriculum(30)
        events = []
        for s, base in enumerate([10, 20, 30, 40, 50]):
            for e in range(12):
                events.append(
                    make_record(f"s{s}", f"e{e:03d}", ts=e, cfa=True, tts=base + e * 0.1)
                )
        snap = build_snapshot(events, cur, built_at=0.0)
        history = StudentHistory()
        for e in range(12):
            history.append(
                make_record("fresh", f"e{e:03d}", ts=e, cfa=True, tts=1.0 + e * 0.01),
                cur.by_id[f"e{e:03d}"],
            )
        idx = descriptor_index("tts", "all", 10, "percentile_rank", "student")
        fv = compute_features(history, snap, cur.exercises[20], "tts_model", [idx])
        assert fv.values[0] == 0.0

    def test_std_under_two_observations_is_zero_and_flagged(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        history = StudentHistory()
        history.append(make_record("s", "e000", cfa=True, tts=30), cur.by_id["e000"])
        idx = descriptor_index("cfa", "all", 3, "std", "student")
        fv = compute_features(history, snap, cur.exercises[5], "cfa_model", [idx])
        assert fv.values[0] == 0.0
        assert not fv.support_flags[0]

    def test_partial_window_uses_available_and_flags(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        history = StudentHistory()
        history.append(make_record("s", "e000", cfa=True, tts=10), cur.by_id["e000"])
        history.append(make_record("s", "e001", cfa=False, tts=20), cur.by_id["e001"])
        idx = descriptor_index("cfa", "all", 5, "mean", "student")
        fv = compute_features(history, snap, cur.exercises[5], "cfa_model", [idx])
        assert fv.values[0] == pytest.approx(0.5)
        assert not fv.support_flags[0]

    def test_pure_function_of_inputs(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        history = StudentHistory()
        for rec in events[:3]:
            history.append(rec, cur.by_id[rec.exercise_id])
        a = compute_features(history, snap, cur.exercises[6], "cfa_model", None)
        b = compute_features(history, snap, cur.exercises[6], "cfa_model", None)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.support_flags, b.support_flags)

    def test_append_changes_only_matching_scopes(self):
        cur = make_curriculum(
            10,
            per_index={
                0: {"exercise_type": "open", "representation": "lines", "goal": "creativity",
                    "learning_unit": "luA"},
                9: {"exercise_type": "multi_choice", "representation": "pie",
                    "goal": "concepts", "learning_unit": "luB"},
            },
        )
        snap = build_snapshot([], cur, built_at=0.0)
        history = StudentHistory()
        history.append(make_record("s", "e001", cfa=True, tts=10), cur.by_id["e001"])
        target = cur.by_id["e009"]
        before = compute_features(history, snap, target, "cfa_model", None)
        # e000 shares nothing with e009: only scope-"all" features may move.
        history.append(make_record("s", "e000", cfa=False, tts=99), cur.by_id["e000"])
        after = compute_features(history, snap, target, "cfa_model", None)
        changed = np.flatnonzero(before.values != after.values)
        for i in changed:
            assert FEATURE_GRID[i].scope == "all", FEATURE_GRID[i]

    def test_vector_length_matches_selection(self, small_world):
        cur, events = small_world
        snap = build_snapshot(events, cur, built_at=0.0)
        sel = default_cfa_features()
        fv = compute_features(StudentHistory(), snap, cur.exercises[0], "cfa_model", sel)
        assert len(fv) == len(sel)


class TestTrainingMatrix:
    def test_rows_use_only_prior_history(self):
        cur = make_curriculum(3)
        events = [
            make_record("s1", "e000", ts=1, cfa=True, tts=10),
            make_record("s1", "e001", ts=2, cfa=False, tts=20),
        ]
        snap = build_snapshot(events, cur, built_at=0.0)
        idx = descriptor_index("cfa", "all", None, "mean", "student")
        mat = build_training_matrix(events, cur, snap, [idx])
        # First row: no prior history, imputed to the population mean.
        assert mat.X[0, 0] == pytest.approx(snap.global_stats.cfa_mean)
        # Second row: history is exactly the first record.
        assert mat.X[1, 0] == 1.0
        assert mat.y_cfa.tolist() == [1.0, 0.0]
        assert mat.y_tts.tolist() == [10.0, 20.0]
