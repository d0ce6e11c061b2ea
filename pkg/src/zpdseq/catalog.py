"""Curriculum catalog and student event-log handling.

The catalog is the content provider's channel into the engine: an ordered
list of exercises (the expert-designed "baseline path") plus the pedagogical
attributes the sequencing policy is allowed to see. Event logs are JSONL,
one attempt record per line, append-friendly so a live service can keep
writing to them.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional

EXERCISE_TYPES = ("multi_choice", "open", "cloze", "other")
REPRESENTATIONS = ("pie", "lines", "other")
GOALS = ("concepts", "implementation", "creativity", "other")

CATALOG_COLUMNS = (
    "exercise_id",
    "section",
    "topic",
    "learning_unit",
    "type",
    "representation",
    "goal",
    "is_bonus",
    "is_mandatory",
    "is_quiz",
)

EVENT_FIELDS = ("student_id", "exercise_id", "ts", "cfa", "tts_sec")


class CatalogError(ValueError):
    """Malformed or inconsistent catalog input."""


class EventValidationError(ValueError):
    """Malformed or inconsistent event-log input."""


@dataclass(frozen=True)
class Exercise:
    exercise_id: str
    section: int
    topic: str
    learning_unit: str
    exercise_type: str
    representation: str
    goal: str
    is_bonus: bool
    is_mandatory: bool
    is_quiz: bool
    baseline_index: int


@dataclass(frozen=True)
class Curriculum:
    """Immutable, validated exercise catalog in baseline order.

    Safe to share across concurrent readers; all derived lookups are built
    once at construction.
    """

    exercises: tuple[Exercise, ...]
    by_id: dict[str, Exercise] = field(repr=False)
    section_boundaries: dict[int, tuple[int, int]]
    topic_count: int
    learning_unit_count: int

    def __len__(self) -> int:
        return len(self.exercises)

    @classmethod
    def from_exercises(cls, exercises: Iterable[Exercise]) -> "Curriculum":
        ordered = sorted(exercises, key=lambda e: e.baseline_index)
        if not ordered:
            raise CatalogError("empty curriculum")
        by_id: dict[str, Exercise] = {}
        for i, ex in enumerate(ordered):
            if ex.baseline_index != i:
                raise CatalogError(
                    f"baseline_index values must densely cover 0..N-1; "
                    f"expected {i}, got {ex.baseline_index} ({ex.exercise_id})"
                )
            if ex.exercise_id in by_id:
                raise CatalogError(f"duplicate exercise_id {ex.exercise_id!r}")
            by_id[ex.exercise_id] = ex
        boundaries: dict[int, tuple[int, int]] = {}
        for i, ex in enumerate(ordered):
            if ex.section in boundaries:
                lo, hi = boundaries[ex.section]
                boundaries[ex.section] = (min(lo, i), max(hi, i))
            else:
                boundaries[ex.section] = (i, i)
        return cls(
            exercises=tuple(ordered),
            by_id=by_id,
            section_boundaries=boundaries,
            topic_count=len({e.topic for e in ordered}),
            learning_unit_count=len({e.learning_unit for e in ordered}),
        )


@dataclass(frozen=True)
class AttemptRecord:
    """One student-exercise interaction.

    ``time_to_success`` is the elapsed seconds until the student produced a
    correct answer, across however many attempts that took; it is therefore
    strictly positive. ``was_skipped_to`` marks that the exercise
    immediately followed a skip.
    """

    student_id: str
    exercise_id: str
    timestamp: float
    correct_first_attempt: bool
    time_to_success: float
    attempt_count: int = 1
    was_skipped_to: bool = False


@dataclass
class EventLoadSummary:
    total_lines: int = 0
    accepted: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def rejected_count(self) -> int:
        return len(self.rejected)


def _text_stream(source: IO) -> IO[str]:
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return io.StringIO(data)


def _parse_bool(raw, line_no: int, column: str) -> bool:
    if isinstance(raw, bool):
        return raw
    token = str(raw).strip().lower()
    if token == "true":
        return True
    if token == "false":
        return False
    raise CatalogError(f"line {line_no}: column {column!r} must be true/false, got {raw!r}")


def _coerce_enum(raw, allowed: tuple[str, ...]) -> str:
    # Real catalogs are incomplete; anything missing or unrecognised maps to
    # the catch-all bucket instead of failing the whole load.
    token = str(raw).strip() if raw is not None else ""
    return token if token in allowed else "other"


def _exercise_from_row(row: dict, line_no: int, baseline_index: int) -> Exercise:
    exercise_id = str(row.get("exercise_id") or "").strip()
    if not exercise_id:
        raise CatalogError(f"line {line_no}: missing exercise_id")
    try:
        section = int(row["section"])
    except (KeyError, TypeError, ValueError):
        raise CatalogError(f"line {line_no}: section must be an integer 1..4") from None
    if not 1 <= section <= 4:
        raise CatalogError(f"line {line_no}: section must be in 1..4, got {section}")
    topic = str(row.get("topic") or "").strip()
    learning_unit = str(row.get("learning_unit") or "").strip()
    if not topic or not learning_unit:
        raise CatalogError(f"line {line_no}: topic and learning_unit are required")
    is_bonus = _parse_bool(row.get("is_bonus", False), line_no, "is_bonus")
    is_mandatory = _parse_bool(row.get("is_mandatory", False), line_no, "is_mandatory")
    is_quiz = _parse_bool(row.get("is_quiz", False), line_no, "is_quiz")
    if "baseline_index" in row and row["baseline_index"] not in (None, ""):
        baseline_index = int(row["baseline_index"])
    return Exercise(
        exercise_id=exercise_id,
        section=section,
        topic=topic,
        learning_unit=learning_unit,
        exercise_type=_coerce_enum(row.get("type"), EXERCISE_TYPES),
        representation=_coerce_enum(row.get("representation"), REPRESENTATIONS),
        goal=_coerce_enum(row.get("goal"), GOALS),
        is_bonus=is_bonus,
        # Quizzes grade students, so they are always served: coerce rather
        # than trust an inconsistent provider flag.
        is_mandatory=is_mandatory or is_quiz,
        is_quiz=is_quiz,
        baseline_index=baseline_index,
    )


def load_curriculum(source: IO, fmt: str = "csv") -> Curriculum:
    """Parse and validate a catalog from a byte or text stream.

    ``baseline_index`` is assigned by row order when the input does not
    carry it explicitly. Raises :class:`CatalogError` with the offending
    line number on malformed rows.
    """
    stream = _text_stream(source)
    exercises: list[Exercise] = []
    if fmt == "csv":
        reader = csv.DictReader(stream)
        if reader.fieldnames is None:
            raise CatalogError("empty curriculum")
        missing = [c for c in CATALOG_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise CatalogError(f"catalog header missing columns: {', '.join(missing)}")
        for i, row in enumerate(reader):
            exercises.append(_exercise_from_row(row, line_no=i + 2, baseline_index=i))
    elif fmt == "jsonl":
        index = 0
        for line_no, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            exercises.append(_exercise_from_row(row, line_no=line_no, baseline_index=index))
            index += 1
    else:
        raise ValueError(f"unknown catalog format {fmt!r}")
    if not exercises:
        raise CatalogError("empty curriculum")
    return Curriculum.from_exercises(exercises)


def dump_curriculum(curriculum: Curriculum, fmt: str = "csv") -> str:
    """Serialize a curriculum so that loading the output round-trips."""
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CATALOG_COLUMNS)
        for ex in curriculum.exercises:
            writer.writerow(
                [
                    ex.exercise_id,
                    ex.section,
                    ex.topic,
                    ex.learning_unit,
                    ex.exercise_type,
                    ex.representation,
                    ex.goal,
                    str(ex.is_bonus).lower(),
                    str(ex.is_mandatory).lower(),
                    str(ex.is_quiz).lower(),
                ]
            )
        return out.getvalue()
    if fmt == "jsonl":
        lines = []
        for ex in curriculum.exercises:
            lines.append(
                json.dumps(
                    {
                        "exercise_id": ex.exercise_id,
                        "section": ex.section,
                        "topic": ex.topic,
                        "learning_unit": ex.learning_unit,
                        "type": ex.exercise_type,
                        "representation": ex.representation,
                        "goal": ex.goal,
                        "is_bonus": ex.is_bonus,
                        "is_mandatory": ex.is_mandatory,
                        "is_quiz": ex.is_quiz,
                        "baseline_index": ex.baseline_index,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown catalog format {fmt!r}")


def next_baseline(curriculum: Curriculum, after_index: int) -> Optional[Exercise]:
    """Successor of ``after_index`` on the baseline path, or None at the end.

    ``after_index == -1`` starts the path. Out-of-range indices are a caller
    bug and raise.
    """
    n = len(curriculum)
    if not -1 <= after_index < n:
        raise ValueError(f"after_index must be in -1..{n - 1}, got {after_index}")
    if after_index == n - 1:
        return None
    return curriculum.exercises[after_index + 1]


def record_to_json(record: AttemptRecord, **extra) -> str:
    """One event-log line for an attempt record (stable key order)."""
    payload = {
        "student_id": record.student_id,
        "exercise_id": record.exercise_id,
        "ts": record.timestamp,
        "cfa": record.correct_first_attempt,
        "tts_sec": record.time_to_success,
        "attempts": record.attempt_count,
        "skipped_to": record.was_skipped_to,
    }
    payload.update(extra)
    return json.dumps(payload, sort_keys=True)


def record_from_dict(row: dict) -> AttemptRecord:
    return AttemptRecord(
        student_id=str(row["student_id"]),
        exercise_id=str(row["exercise_id"]),
        timestamp=float(row["ts"]),
        correct_first_attempt=bool(row["cfa"]),
        time_to_success=float(row["tts_sec"]),
        attempt_count=int(row.get("attempts", 1)),
        was_skipped_to=bool(row.get("skipped_to", False)),
    )


def load_events(
    source: IO, curriculum: Optional[Curriculum] = None
) -> tuple[list[AttemptRecord], EventLoadSummary]:
    """Load a JSONL event log.

    Output is grouped by student (order of first appearance) and sorted by
    timestamp within each student. Records with non-positive
    ``time_to_success`` are dropped and reported in the summary; an
    exercise_id absent from a supplied curriculum is an error.
    """
    stream = _text_stream(source)
    summary = EventLoadSummary()
    per_student: dict[str, list[AttemptRecord]] = {}
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        summary.total_lines += 1
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EventValidationError(f"line {line_no}: invalid JSON ({exc.msg})") from None
        missing = [f for f in EVENT_FIELDS if f not in row]
        if missing:
            raise EventValidationError(
                f"line {line_no}: missing fields: {', '.join(missing)}"
            )
        record = record_from_dict(row)
        if curriculum is not None and record.exercise_id not in curriculum.by_id:
            raise EventValidationError(
                f"line {line_no}: unknown exercise_id {record.exercise_id!r}"
            )
        if record.time_to_success <= 0:
            summary.rejected.append((line_no, "non-positive time_to_success"))
            continue
        summary.accepted += 1
        per_student.setdefault(record.student_id, []).append(record)
    records: list[AttemptRecord] = []
    for student_records in per_student.values():
        records.extend(sorted(student_records, key=lambda r: r.timestamp))
    return records, summary


def group_by_student(records: Iterable[AttemptRecord]) -> dict[str, list[AttemptRecord]]:
    """Records keyed by student, preserving the given relative order."""
    grouped: dict[str, list[AttemptRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.student_id, []).append(rec)
    return grouped
