from __future__ import annotations

import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zpdseq.catalog import (
    CatalogError,
    EventValidationError,
    dump_curriculum,
    group_by_student,
    load_curriculum,
    load_events,
    next_baseline,
    record_to_json,
)

from conftest import make_curriculum, make_record


def catalog_csv(rows: list[dict]) -> io.BytesIO:
    header = "exercise_id,section,topic,learning_unit,type,representation,goal,is_bonus,is_mandatory,is_quiz"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['exercise_id']},{r.get('section', 1)},{r.get('topic', 'frac')},"
            f"{r.get('learning_unit', 'lu1')},{r.get('type', 'multi_choice')},"
            f"{r.get('representation', 'pie')},{r.get('goal', 'concepts')},"
            f"{r.get('is_bonus', 'false')},{r.get('is_mandatory', 'false')},{r.get('is_quiz', 'false')}"
        )
    return io.BytesIO("\n".join(lines).encode())


def events_jsonl(rows: list[dict]) -> io.BytesIO:
    lines = []
    for r in rows:
        base = {"attempts": 1, "skipped_to": False}
        base.update(r)
        lines.append(json.dumps(base))
    return io.BytesIO("\n".join(lines).encode())


class TestLoadCurriculum:
    def test_assigns_baseline_index_by_row_order(self):
        cur = load_curriculum(catalog_csv([{"exercise_id": f"x{i}"} for i in range(3)]))
        assert [e.baseline_index for e in cur.exercises] == [0, 1, 2]
        assert [e.exercise_id for e in cur.exercises] == ["x0", "x1", "x2"]

    def test_empty_stream_is_an_error(self):
        with pytest.raises(CatalogError, match="empty curriculum"):
            load_curriculum(io.BytesIO(b""))

    def test_header_only_is_an_error(self):
        stream = catalog_csv([])
        with pytest.raises(CatalogError, match="empty curriculum"):
            load_curriculum(stream)

    def test_duplicate_exercise_id_rejected(self):
        stream = catalog_csv([{"exercise_id": "dup"}, {"exercise_id": "dup"}])
        with pytest.raises(CatalogError, match="duplicate"):
            load_curriculum(stream)

    def test_malformed_row_cites_line_number(self):
        stream = catalog_csv([{"exercise_id": "a"}, {"exercise_id": "b", "section": "nine"}])
        with pytest.raises(CatalogError, match="line 3"):
            load_curriculum(stream)

    def test_section_out_of_range_rejected(self):
        stream = catalog_csv([{"exercise_id": "a", "section": 5}])
        with pytest.raises(CatalogError, match="1..4"):
            load_curriculum(stream)

    def test_unknown_optional_attributes_default_to_other(self):
        stream = catalog_csv([{"exercise_id": "a", "representation": "", "goal": "weird"}])
        cur = load_curriculum(stream)
        assert cur.exercises[0].representation == "other"
        assert cur.exercises[0].goal == "other"

    def test_quiz_is_always_mandatory(self):
        stream = catalog_csv([{"exercise_id": "a", "is_quiz": "true", "is_mandatory": "false"}])
        cur = load_curriculum(stream)
        assert cur.exercises[0].is_mandatory

    def test_counts(self):
        rows = [
            {"exercise_id": "a", "topic": "t1", "learning_unit": "u1"},
            {"exercise_id": "b", "topic": "t1", "learning_unit": "u2"},
            {"exercise_id": "c", "topic": "t2", "learning_unit": "u3"},
        ]
        cur = load_curriculum(catalog_csv(rows))
        assert cur.topic_count == 2
        assert cur.learning_unit_count == 3

    def test_full_scale_catalog_counts(self):
        # A production-sized program: 702 exercises over 120 learning units
        # and 13 topics, four sections.
        rows = []
        for i in range(702):
            lu = i * 120 // 702
            rows.append(
                {
                    "exercise_id": f"ex{i:04d}",
                    "section": min(i // 176, 3) + 1,
                    "topic": f"t{lu * 13 // 120:02d}",
                    "learning_unit": f"lu{lu:03d}",
                }
            )
        cur = load_curriculum(catalog_csv(rows))
        assert len(cur) == 702
        assert cur.topic_count == 13
        assert cur.learning_unit_count == 120

    def test_jsonl_format_round_trip(self):
        cur = make_curriculum(7)
        text = dump_curriculum(cur, fmt="jsonl")
        again = load_curriculum(io.BytesIO(text.encode()), fmt="jsonl")
        assert again.exercises == cur.exercises

    def test_csv_round_trip_identical(self):
        cur = make_curriculum(12, per_index={3: {"is_bonus": True}, 5: {"is_quiz": True}})
        text = dump_curriculum(cur, fmt="csv")
        again = load_curriculum(io.BytesIO(text.encode()), fmt="csv")
        assert again.exercises == cur.exercises
        assert dump_curriculum(again, fmt="csv") == text


class TestNextBaseline:
    def test_start_of_path(self, ten_exercise_curriculum):
        ex = next_baseline(ten_exercise_curriculum, -1)
        assert ex is not None and ex.baseline_index == 0

    def test_exhaustion(self, ten_exercise_curriculum):
        assert next_baseline(ten_exercise_curriculum, 9) is None

    def test_successor(self, ten_exercise_curriculum):
        ex = next_baseline(ten_exercise_curriculum, 4)
        assert ex is not None and ex.baseline_index == 5

    def test_out_of_range_raises(self, ten_exercise_curriculum):
        with pytest.raises(ValueError):
            next_baseline(ten_exercise_curriculum, 10)
        with pytest.raises(ValueError):
            next_baseline(ten_exercise_curriculum, -2)

    @given(st.integers(min_value=0, max_value=8))
    def test_successor_property(self, i):
        cur = make_curriculum(10)
        assert next_baseline(cur, i).baseline_index == i + 1


class TestLoadEvents:
    def test_reorders_by_timestamp_within_student(self):
        stream = events_jsonl(
            [
                {"student_id": "s1", "exercise_id": "a", "ts": 10, "cfa": True, "tts_sec": 5},
                {"student_id": "s1", "exercise_id": "b", "ts": 5, "cfa": False, "tts_sec": 7},
            ]
        )
        records, summary = load_events(stream)
        assert [r.timestamp for r in records] == [5, 10]
        assert summary.accepted == 2

    def test_nonpositive_tts_rejected_and_reported(self):
        stream = events_jsonl(
            [
                {"student_id": "s1", "exercise_id": "a", "ts": 1, "cfa": True, "tts_sec": 0},
                {"student_id": "s1", "exercise_id": "b", "ts": 2, "cfa": True, "tts_sec": 3},
            ]
        )
        records, summary = load_events(stream)
        assert len(records) == 1
        assert summary.rejected_count == 1
        assert summary.rejected[0][0] == 1

    def test_unknown_exercise_with_curriculum_raises(self, ten_exercise_curriculum):
        stream = events_jsonl(
            [{"student_id": "s1", "exercise_id": "nope", "ts": 1, "cfa": True, "tts_sec": 3}]
        )
        with pytest.raises(EventValidationError, match="unknown exercise_id"):
            load_events(stream, ten_exercise_curriculum)

    def test_missing_field_raises_with_line(self):
        stream = io.BytesIO(b'{"student_id": "s1", "exercise_id": "a"}')
        with pytest.raises(EventValidationError, match="line 1"):
            load_events(stream)

    def test_counts_match_independent_grouping_oracle(self):
        # Oracle: count lines per student with a plain line-by-line pass.
        import random

        rng = random.Random(42)
        rows = []
        for i in range(100):
            rows.append(
                {
                    "student_id": f"s{rng.randrange(7)}",
                    "exercise_id": f"e{rng.randrange(20)}",
                    "ts": rng.uniform(0, 1000),
                    "cfa": rng.random() < 0.7,
                    "tts_sec": rng.uniform(1, 100),
                }
            )
        expected_counts: dict[str, int] = {}
        for r in rows:
            expected_counts[r["student_id"]] = expected_counts.get(r["student_id"], 0) + 1

        records, summary = load_events(events_jsonl(rows))
        assert summary.accepted == 100
        grouped = group_by_student(records)
        assert {s: len(v) for s, v in grouped.items()} == expected_counts
        for recs in grouped.values():
            assert all(a.timestamp <= b.timestamp for a, b in zip(recs, recs[1:]))

    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["s1", "s2", "s3"]),
                st.floats(min_value=0, max_value=100, allow_nan=False),
                st.one_of(st.just(0.0), st.floats(min_value=0.1, max_value=50)),
            ),
            max_size=30,
        )
    )
    @settings(max_examples=50)
    def test_accepted_plus_rejected_equals_input(self, rows):
        payload = [
            {"student_id": s, "exercise_id": "e", "ts": ts, "cfa": True, "tts_sec": tts}
            for s, ts, tts in rows
        ]
        records, summary = load_events(events_jsonl(payload))
        assert summary.accepted + summary.rejected_count == len(payload)
        assert len(records) == summary.accepted

    def test_record_to_json_round_trip(self):
        rec = make_record("s1", "e001", ts=12.5, cfa=False, tts=9.25)
        line = record_to_json(rec)
        records, _ = load_events(io.BytesIO(line.encode()))
        assert records[0] == rec
