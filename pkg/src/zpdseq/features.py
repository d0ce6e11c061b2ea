"""Feature grid, population snapshot, and per-request feature vectors.

The engine scores a (student, target exercise) pair with features drawn from
a fixed grid of descriptors. Each descriptor is a combination of:

* ``metric``     - cfa (first-attempt correctness, 0/1) or tts (seconds)
* ``scope``      - which past records count: everything, only records whose
                   exercise shares the target's type / representation / goal /
                   learning unit, or the target exercise itself
* ``window``     - last 1, 3, 5, 10 or 20 matching records, or full history
* ``aggregate``  - mean, std, or the student's percentile rank among all
                   students' same-window means
* ``subject``    - the student's own history, or population statistics

The full cross product is pruned to exactly 180 cells by rules that remove
degenerate combinations (see :func:`enumerate_feature_grid`). Grid order is
stable across runs: descriptor indices are part of the model file contract.

Population statistics live in a :class:`FeatureStoreSnapshot`, an immutable
value rebuilt periodically (weekly in deployment) from the event log and
swapped in atomically, so request handling never observes a half-built
snapshot.
"""
from __future__ import annotations

import json
import math
import time
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .catalog import AttemptRecord, Curriculum, Exercise, group_by_student

METRICS = ("cfa", "tts")
STUDENT_SCOPES = ("all", "same_type", "same_representation", "same_goal", "same_lu")
POPULATION_SCOPES = ("same_type", "same_representation", "same_goal", "same_lu", "target_exercise")
WINDOWS = (1, 3, 5, 10, 20, None)  # None = full history
RANK_WINDOWS = (3, 5, 10, 20, None)
AGGREGATES = ("mean", "std", "percentile_rank")

GRID_SIZE = 180

# Fallbacks when there is no population data at all.
COLD_CFA_MEAN = 0.5
COLD_TTS_MEAN = 60.0

SNAPSHOT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureDescriptor:
    index: int
    metric: str
    scope: str
    window: Optional[int]
    aggregate: str
    subject: str

    def key(self) -> str:
        w = "all" if self.window is None else str(self.window)
        return f"{self.subject}|{self.metric}|{self.scope}|{w}|{self.aggregate}"


def _build_grid() -> tuple[FeatureDescriptor, ...]:
    descriptors: list[FeatureDescriptor] = []
    # Student-subject block. The target exercise itself is excluded (the
    # student has not attempted it yet, by definition of "next exercise").
    # std over one record is identically zero and a rank of a single record
    # is maximally noisy, so both start at window 3.
    for metric in METRICS:
        for scope in STUDENT_SCOPES:
            for aggregate in AGGREGATES:
                for window in WINDOWS:
                    if aggregate in ("std", "percentile_rank") and window == 1:
                        continue
                    descriptors.append(
                        FeatureDescriptor(
                            index=len(descriptors),
                            metric=metric,
                            scope=scope,
                            window=window,
                            aggregate=aggregate,
                            subject="student",
                        )
                    )
    # Population-subject block: snapshot properties of the target's exercise,
    # learning unit, type, representation, or goal. These have no window (the
    # snapshot aggregates everything) and no rank (there is no student axis).
    # A scope of "all" would be the same constant for every target, so it is
    # not a feature.
    for metric in METRICS:
        for scope in POPULATION_SCOPES:
            for aggregate in ("mean", "std"):
                descriptors.append(
                    FeatureDescriptor(
                        index=len(descriptors),
                        metric=metric,
                        scope=scope,
                        window=None,
                        aggregate=aggregate,
                        subject="population",
                    )
                )
    assert len(descriptors) == GRID_SIZE, len(descriptors)
    return tuple(descriptors)


FEATURE_GRID: tuple[FeatureDescriptor, ...] = _build_grid()
_GRID_LOOKUP = {
    (d.metric, d.scope, d.window, d.aggregate, d.subject): d.index for d in FEATURE_GRID
}


def enumerate_feature_grid() -> tuple[FeatureDescriptor, ...]:
    """The full 180-descriptor grid, in stable index order."""
    return FEATURE_GRID


def descriptor_index(
    metric: str, scope: str, window: Optional[int], aggregate: str, subject: str
) -> int:
    """Grid index of a descriptor; raises KeyError for a pruned combination."""
    return _GRID_LOOKUP[(metric, scope, window, aggregate, subject)]


def export_feature_grid_csv() -> str:
    """Audit export: one row per descriptor."""
    lines = ["index,metric,scope,window,aggregate,subject"]
    for d in FEATURE_GRID:
        w = "all" if d.window is None else str(d.window)
        lines.append(f"{d.index},{d.metric},{d.scope},{w},{d.aggregate},{d.subject}")
    return "\n".join(lines) + "\n"


def _indices(cells) -> tuple[int, ...]:
    return tuple(descriptor_index(*cell) for cell in cells)


def default_cfa_features() -> tuple[int, ...]:
    """Curated 20-descriptor default for the first-attempt-success model.

    Recent same-type and same-representation success rates, overall rolling
    success and pace, and the target exercise's own population statistics.
    Used when no feature-selection run is supplied; a selection run
    (see ``models.rfe_select``) can replace it.
    """
    return _indices(
        [
            ("cfa", "same_type", 1, "mean", "student"),
            ("cfa", "same_type", 3, "mean", "student"),
            ("cfa", "same_type", 5, "mean", "student"),
            ("cfa", "same_type", 20, "mean", "student"),
            ("cfa", "same_representation", 20, "mean", "student"),
            ("tts", "all", 1, "mean", "student"),
            ("cfa", "target_exercise", None, "mean", "population"),
            ("cfa", "all", None, "mean", "student"),
            ("tts", "all", None, "mean", "student"),
            ("cfa", "same_lu", None, "mean", "population"),
            ("cfa", "all", 3, "mean", "student"),
            ("cfa", "all", 5, "mean", "student"),
            ("cfa", "all", 10, "mean", "student"),
            ("cfa", "all", 20, "mean", "student"),
            ("cfa", "same_lu", 20, "mean", "student"),
            ("cfa", "same_goal", 20, "mean", "student"),
            ("cfa", "target_exercise", None, "std", "population"),
            ("tts", "target_exercise", None, "mean", "population"),
            ("tts", "all", 5, "mean", "student"),
            ("cfa", "all", None, "percentile_rank", "student"),
        ]
    )


def default_tts_features() -> tuple[int, ...]:
    """Curated 20-descriptor default for the time-to-success model.

    Pace ranks against the population at several windows and scopes, the
    student's own rolling solve times, and the target exercise's duration
    statistics.
    """
    return _indices(
        [
            ("tts", "all", 3, "percentile_rank", "student"),
            ("tts", "all", 10, "percentile_rank", "student"),
            ("tts", "all", 20, "percentile_rank", "student"),
            ("tts", "same_type", 3, "percentile_rank", "student"),
            ("tts", "same_type", 5, "percentile_rank", "student"),
            ("tts", "same_type", 10, "percentile_rank", "student"),
            ("tts", "same_type", 20, "percentile_rank", "student"),
            ("tts", "same_representation", 3, "percentile_rank", "student"),
            ("tts", "same_goal", 3, "percentile_rank", "student"),
            ("tts", "target_exercise", None, "std", "population"),
            ("tts", "target_exercise", None, "mean", "population"),
            ("tts", "all", 1, "mean", "student"),
            ("tts", "all", 3, "mean", "student"),
            ("tts", "all", 5, "mean", "student"),
            ("tts", "all", 20, "mean", "student"),
            ("tts", "same_type", 20, "mean", "student"),
            ("tts", "all", None, "mean", "student"),
            ("tts", "same_lu", None, "mean", "population"),
            ("tts", "all", None, "percentile_rank", "student"),
            ("cfa", "all", 20, "mean", "student"),
        ]
    )


def percentile_rank(value: float, base: Sequence[float]) -> float:
    """Mid-rank percentile of ``value`` within a sorted ``base``.

    Fraction of the base strictly below ``value`` plus half the fraction
    equal to it. Empty base has no information; callers treat the 0.5
    returned here as imputed.
    """
    n = len(base)
    if n == 0:
        return 0.5
    lo = bisect_left(base, value)
    hi = bisect_right(base, value)
    return (lo + 0.5 * (hi - lo)) / n


def _scope_value(scope: str, exercise: Exercise) -> str:
    if scope == "all":
        return ""
    if scope == "same_type":
        return exercise.exercise_type
    if scope == "same_representation":
        return exercise.representation
    if scope == "same_goal":
        return exercise.goal
    if scope == "same_lu":
        return exercise.learning_unit
    if scope == "target_exercise":
        return exercise.exercise_id
    raise ValueError(f"unknown scope {scope!r}")


class StudentHistory:
    """Append-only record of one student's served-and-answered exercises.

    Keeps per-scope views so windowed features are cheap to compute. Only
    exercises that were actually served may be appended; skipped exercises
    never enter a history (that is what keeps replay evaluation honest).
    """

    __slots__ = ("_by_scope", "n_records")

    def __init__(self) -> None:
        self._by_scope: dict[tuple[str, str], list[tuple[float, float]]] = {}
        self.n_records = 0

    def append(self, record: AttemptRecord, exercise: Exercise) -> None:
        if record.exercise_id != exercise.exercise_id:
            raise ValueError("record/exercise mismatch")
        point = (1.0 if record.correct_first_attempt else 0.0, record.time_to_success)
        for scope in STUDENT_SCOPES:
            key = (scope, _scope_value(scope, exercise))
            self._by_scope.setdefault(key, []).append(point)
        self.n_records += 1

    def scoped(self, scope: str, value: str) -> list[tuple[float, float]]:
        return self._by_scope.get((scope, value), [])


@dataclass(frozen=True)
class GroupStats:
    cfa_mean: float
    cfa_std: float
    tts_mean: float
    tts_std: float
    n_observations: int

    @classmethod
    def empty(cls) -> "GroupStats":
        return cls(0.0, 0.0, 0.0, 0.0, 0)

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, float]]) -> "GroupStats":
        n = len(points)
        if n == 0:
            return cls.empty()
        cfa = [p[0] for p in points]
        tts = [p[1] for p in points]
        return cls(
            cfa_mean=_mean(cfa),
            cfa_std=_std(cfa),
            tts_mean=_mean(tts),
            tts_std=_std(tts),
            n_observations=n,
        )

    def metric_value(self, metric: str, aggregate: str) -> float:
        return getattr(self, f"{metric}_{aggregate}")


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs)


def _std(xs: Sequence[float]) -> float:
    # Population std; fewer than two observations is defined as 0.
    n = len(xs)
    if n < 2:
        return 0.0
    m = sum(xs) / n
    var = sum((x - m) ** 2 for x in xs) / n
    return math.sqrt(max(var, 0.0))


@dataclass(frozen=True)
class FeatureStoreSnapshot:
    """Immutable population statistics behind per-request features.

    ``rank_bases`` maps ``"metric|scope|window"`` to per-scope-value sorted
    lists of per-student window statistics, one entry per student who has at
    least one matching record. Group statistics are pooled over all attempt
    records of the group's exercises.
    """

    version: int
    built_at: float
    per_exercise: dict[str, GroupStats]
    per_lu: dict[str, GroupStats]
    per_type: dict[str, GroupStats]
    per_representation: dict[str, GroupStats]
    per_goal: dict[str, GroupStats]
    rank_bases: dict[str, dict[str, list[float]]]
    global_stats: GroupStats

    def group_stats(self, scope: str, value: str) -> Optional[GroupStats]:
        table = {
            "target_exercise": self.per_exercise,
            "same_lu": self.per_lu,
            "same_type": self.per_type,
            "same_representation": self.per_representation,
            "same_goal": self.per_goal,
        }[scope]
        return table.get(value)

    def default_for(self, metric: str, aggregate: str) -> float:
        """Imputation value for a feature with no supporting observations."""
        if aggregate == "percentile_rank":
            return 0.5
        if self.global_stats.n_observations == 0:
            if aggregate == "std":
                return 0.0
            return COLD_CFA_MEAN if metric == "cfa" else COLD_TTS_MEAN
        return self.global_stats.metric_value(metric, aggregate)


def _rank_base_key(metric: str, scope: str, window: Optional[int]) -> str:
    w = "all" if window is None else str(window)
    return f"{metric}|{scope}|{w}"


def _window_tail(seq: Sequence[tuple[float, float]], window: Optional[int]):
    if window is None or len(seq) <= window:
        return seq
    return seq[-window:]


def build_snapshot(
    events: Sequence[AttemptRecord],
    curriculum: Curriculum,
    version: int = 1,
    built_at: Optional[float] = None,
) -> FeatureStoreSnapshot:
    """Full-scan aggregation of an event log into population statistics.

    Exercises (or groups) with zero observations simply have no entry;
    nothing is fabricated. Rank bases get one statistic per student per
    (metric, scope, window, scope value), computed over the tail of that
    student's matching records.
    """
    for rec in events:
        if rec.exercise_id not in curriculum.by_id:
            raise EventKeyError(rec.exercise_id)

    buckets: dict[str, dict[str, list[tuple[float, float]]]] = {
        scope: {} for scope in POPULATION_SCOPES
    }
    all_points: list[tuple[float, float]] = []
    per_student_scoped: dict[str, dict[tuple[str, str], list[tuple[float, float]]]] = {}

    for rec in events:
        ex = curriculum.by_id[rec.exercise_id]
        point = (1.0 if rec.correct_first_attempt else 0.0, rec.time_to_success)
        all_points.append(point)
        for scope in POPULATION_SCOPES:
            buckets[scope].setdefault(_scope_value(scope, ex), []).append(point)
        scoped = per_student_scoped.setdefault(rec.student_id, {})
        for scope in STUDENT_SCOPES:
            scoped.setdefault((scope, _scope_value(scope, ex)), []).append(point)

    rank_bases: dict[str, dict[str, list[float]]] = {}
    for metric_idx, metric in enumerate(METRICS):
        for scope in STUDENT_SCOPES:
            for window in RANK_WINDOWS:
                key = _rank_base_key(metric, scope, window)
                per_value: dict[str, list[float]] = {}
                for scoped in per_student_scoped.values():
                    for (s, value), seq in scoped.items():
                        if s != scope:
                            continue
                        tail = _window_tail(seq, window)
                        stat = _mean([p[metric_idx] for p in tail])
                        per_value.setdefault(value, []).append(stat)
                if per_value:
                    rank_bases[key] = {v: sorted(xs) for v, xs in per_value.items()}

    return FeatureStoreSnapshot(
        version=version,
        built_at=time.time() if built_at is None else built_at,
        per_exercise={
            v: GroupStats.from_points(pts) for v, pts in buckets["target_exercise"].items()
        },
        per_lu={v: GroupStats.from_points(pts) for v, pts in buckets["same_lu"].items()},
        per_type={v: GroupStats.from_points(pts) for v, pts in buckets["same_type"].items()},
        per_representation={
            v: GroupStats.from_points(pts) for v, pts in buckets["same_representation"].items()
        },
        per_goal={v: GroupStats.from_points(pts) for v, pts in buckets["same_goal"].items()},
        rank_bases=rank_bases,
        global_stats=GroupStats.from_points(all_points),
    )


class EventKeyError(ValueError):
    def __init__(self, exercise_id: str):
        super().__init__(f"event references unknown exercise {exercise_id!r}")


@dataclass(frozen=True)
class FeatureVector:
    """Feature values aligned to a model's selected-descriptor list.

    ``support_flags[i]`` is True when value ``i`` was computed from a full
    window of real observations, False when it was imputed or computed from
    a partial window.
    """

    model_kind: str
    values: np.ndarray
    support_flags: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def _student_feature(
    history: StudentHistory,
    snapshot: FeatureStoreSnapshot,
    target: Exercise,
    d: FeatureDescriptor,
) -> tuple[float, bool]:
    seq = history.scoped(d.scope, _scope_value(d.scope, target))
    n = len(seq)
    metric_idx = 0 if d.metric == "cfa" else 1
    if d.aggregate == "percentile_rank":
        if n == 0:
            return snapshot.default_for(d.metric, d.aggregate), False
        tail = _window_tail(seq, d.window)
        stat = _mean([p[metric_idx] for p in tail])
        base_key = _rank_base_key(d.metric, d.scope, d.window)
        base = snapshot.rank_bases.get(base_key, {}).get(_scope_value(d.scope, target))
        if not base:
            return 0.5, False
        full = n >= d.window if d.window is not None else True
        return percentile_rank(stat, base), full
    if d.aggregate == "mean":
        if n == 0:
            return snapshot.default_for(d.metric, d.aggregate), False
        tail = _window_tail(seq, d.window)
        full = n >= d.window if d.window is not None else True
        return _mean([p[metric_idx] for p in tail]), full
    if d.aggregate == "std":
        tail = _window_tail(seq, d.window)
        if len(tail) < 2:
            return 0.0, False
        full = n >= d.window if d.window is not None else True
        return _std([p[metric_idx] for p in tail]), full
    raise ValueError(f"unknown aggregate {d.aggregate!r}")


def _population_feature(
    snapshot: FeatureStoreSnapshot, target: Exercise, d: FeatureDescriptor
) -> tuple[float, bool]:
    stats = snapshot.group_stats(d.scope, _scope_value(d.scope, target))
    if stats is None or stats.n_observations == 0:
        return snapshot.default_for(d.metric, d.aggregate), False
    return stats.metric_value(d.metric, d.aggregate), True


def compute_values(
    history: StudentHistory,
    snapshot: FeatureStoreSnapshot,
    target: Exercise,
    descriptor_indices: Sequence[int],
) -> tuple[list[float], list[bool]]:
    """Raw (values, support flags) for a subset of grid descriptors."""
    values: list[float] = []
    flags: list[bool] = []
    for idx in descriptor_indices:
        d = FEATURE_GRID[idx]
        if d.subject == "student":
            v, f = _student_feature(history, snapshot, target, d)
        else:
            v, f = _population_feature(snapshot, target, d)
        values.append(v)
        flags.append(f)
    return values, flags


def compute_features(
    history: StudentHistory,
    snapshot: FeatureStoreSnapshot,
    target: Exercise,
    model_kind: str,
    selected_features: Optional[Sequence[int]] = None,
) -> FeatureVector:
    """Feature vector for one (student, target) pair.

    Pure function of its inputs: identical history/snapshot/target always
    produce an identical vector. ``selected_features`` defaults to the full
    grid; models pass their own selected-descriptor lists.
    """
    indices = range(GRID_SIZE) if selected_features is None else selected_features
    values, flags = compute_values(history, snapshot, target, list(indices))
    return FeatureVector(
        model_kind=model_kind,
        values=np.asarray(values, dtype=np.float64),
        support_flags=np.asarray(flags, dtype=bool),
    )


@dataclass
class TrainingMatrix:
    """Per-row full-history features with both task labels."""

    X: np.ndarray
    y_cfa: np.ndarray
    y_tts: np.ndarray
    student_ids: list[str]
    exercise_ids: list[str]
    descriptor_indices: tuple[int, ...]


def build_training_matrix(
    events: Sequence[AttemptRecord],
    curriculum: Curriculum,
    snapshot: FeatureStoreSnapshot,
    descriptor_indices: Optional[Sequence[int]] = None,
) -> TrainingMatrix:
    """One training row per event, features computed from the records that
    preceded it in the same student's history (never from the row itself)."""
    indices = tuple(range(GRID_SIZE) if descriptor_indices is None else descriptor_indices)
    rows: list[list[float]] = []
    y_cfa: list[float] = []
    y_tts: list[float] = []
    students: list[str] = []
    exercise_ids: list[str] = []
    for student_id, recs in group_by_student(events).items():
        history = StudentHistory()
        for rec in recs:
            ex = curriculum.by_id[rec.exercise_id]
            values, _ = compute_values(history, snapshot, ex, indices)
            rows.append(values)
            y_cfa.append(1.0 if rec.correct_first_attempt else 0.0)
            y_tts.append(rec.time_to_success)
            students.append(student_id)
            exercise_ids.append(rec.exercise_id)
            history.append(rec, ex)
    X = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(indices)))
    return TrainingMatrix(
        X=X,
        y_cfa=np.asarray(y_cfa, dtype=np.float64),
        y_tts=np.asarray(y_tts, dtype=np.float64),
        student_ids=students,
        exercise_ids=exercise_ids,
        descriptor_indices=indices,
    )


def _stats_to_dict(stats: GroupStats) -> dict:
    return {
        "cfa_mean": stats.cfa_mean,
        "cfa_std": stats.cfa_std,
        "tts_mean": stats.tts_mean,
        "tts_std": stats.tts_std,
        "n_observations": stats.n_observations,
    }


def _stats_from_dict(d: dict) -> GroupStats:
    return GroupStats(
        cfa_mean=float(d["cfa_mean"]),
        cfa_std=float(d["cfa_std"]),
        tts_mean=float(d["tts_mean"]),
        tts_std=float(d["tts_std"]),
        n_observations=int(d["n_observations"]),
    )


def snapshot_to_json(snapshot: FeatureStoreSnapshot) -> str:
    doc = {
        "format_version": SNAPSHOT_FORMAT_VERSION,
        "version": snapshot.version,
        "built_at": snapshot.built_at,
        "per_exercise": {k: _stats_to_dict(v) for k, v in snapshot.per_exercise.items()},
        "per_lu": {k: _stats_to_dict(v) for k, v in snapshot.per_lu.items()},
        "per_type": {k: _stats_to_dict(v) for k, v in snapshot.per_type.items()},
        "per_representation": {
            k: _stats_to_dict(v) for k, v in snapshot.per_representation.items()
        },
        "per_goal": {k: _stats_to_dict(v) for k, v in snapshot.per_goal.items()},
        "rank_bases": snapshot.rank_bases,
        "global_stats": _stats_to_dict(snapshot.global_stats),
    }
    return json.dumps(doc, sort_keys=True)


def snapshot_from_json(text: str) -> FeatureStoreSnapshot:
    doc = json.loads(text)
    if doc.get("format_version") != SNAPSHOT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported snapshot format version {doc.get('format_version')!r}"
        )
    return FeatureStoreSnapshot(
        version=int(doc["version"]),
        built_at=float(doc["built_at"]),
        per_exercise={k: _stats_from_dict(v) for k, v in doc["per_exercise"].items()},
        per_lu={k: _stats_from_dict(v) for k, v in doc["per_lu"].items()},
        per_type={k: _stats_from_dict(v) for k, v in doc["per_type"].items()},
        per_representation={
            k: _stats_from_dict(v) for k, v in doc["per_representation"].items()
        },
        per_goal={k: _stats_from_dict(v) for k, v in doc["per_goal"].items()},
        rank_bases={
            key: {v: [float(x) for x in xs] for v, xs in inner.items()}
            for key, inner in doc["rank_bases"].items()
        },
        global_stats=_stats_from_dict(doc["global_stats"]),
    )


def save_snapshot(snapshot: FeatureStoreSnapshot, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(snapshot_to_json(snapshot))


def load_snapshot(path) -> FeatureStoreSnapshot:
    with open(path, "r", encoding="utf-8") as fh:
        return snapshot_from_json(fh.read())
