from __future__ import annotations

import pytest

from zpdseq.catalog import AttemptRecord, Curriculum, Exercise


def make_exercise(
    i: int,
    *,
    exercise_type: str = "multi_choice",
    representation: str = "pie",
    goal: str = "concepts",
    learning_unit: str | None = None,
    topic: str | None = None,
    section: int = 1,
    is_bonus: bool = False,
    is_mandatory: bool = False,
    is_quiz: bool = False,
) -> Exercise:
    return Exercise(
        exercise_id=f"e{i:03d}",
        section=section,
        topic=topic or f"t{i // 6}",
        learning_unit=learning_unit or f"lu{i // 3}",
        exercise_type=exercise_type,
        representation=representation,
        goal=goal,
        is_bonus=is_bonus,
        is_mandatory=is_mandatory or is_quiz,
        is_quiz=is_quiz,
        baseline_index=i,
    )


def make_curriculum(n: int = 10, **overrides) -> Curriculum:
    per_index = overrides.pop("per_index", {})
    exercises = [make_exercise(i, **per_index.get(i, {}), **overrides) for i in range(n)]
    return Curriculum.from_exercises(exercises)


def make_record(
    student: str,
    exercise_id: str,
    *,
    ts: float = 0.0,
    cfa: bool = True,
    tts: float = 30.0,
) -> AttemptRecord:
    return AttemptRecord(
        student_id=student,
        exercise_id=exercise_id,
        timestamp=ts,
        correct_first_attempt=cfa,
        time_to_success=tts,
    )


@pytest.fixture
def ten_exercise_curriculum() -> Curriculum:
    return make_curriculum(10)
