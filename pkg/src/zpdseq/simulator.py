"""Offline evaluation harness: synthetic cohorts and policy replay.

The real deployment logs are proprietary, so evaluation runs on a synthetic
cohort with the structure the policies exploit: each student has a stable
latent ability, pace and guessing propensity; each exercise has a latent
difficulty and intrinsic length. First-attempt correctness is Bernoulli in
the logistic of (ability - difficulty); time to success is log-normal with a
location shifted by the same gap, by the student's pace, and by the
exercise's intrinsic length. Every student attempts every exercise, so a
replay can consult the recorded outcome of any exercise a policy decides to
skip.

Replay walks each student's baseline path and asks the policy, exercise by
exercise, to skip or serve. Three families are supported:

* ``random:p``     - skip with fixed probability p
* ``benchmark:n``  - skip after n consecutive first-attempt successes (the
                     streak restarts after each skip)
* ``adaptive:cfg`` - the prediction-driven ZPD policy

The adaptive family carries the engine's mechanics (mandatory overrides,
the consecutive-skip cap, exploration); the comparators are pure chance and
streak rules. Adaptive features are computed only from exercises actually
served so far; skipped outcomes are consulted solely to score the skip
afterwards. Rollback is an online repair mechanic and is not simulated
here: offline metrics are defined over skips.

A skip is *bad* when the recorded outcome shows a struggle: wrong at first
attempt, or slower than the exercise's average across the replayed cohort.
FPR is the fraction of skips that are bad; time saved is the per-student
ratio of skipped time to total time, averaged over students.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .catalog import AttemptRecord, Curriculum, Exercise, group_by_student
from .features import FeatureStoreSnapshot, StudentHistory, compute_features
from .models import ForestModel, predict_cfa, predict_tts
from .policy import (
    PolicyConfig,
    Predictions,
    ZONE_WITHIN,
    classify_zpd,
)

GUESS_TTS_CEILING = 2.1  # generated guesses land below this

# ---------------------------------------------------------------------------
# Synthetic curriculum and cohort


@dataclass(frozen=True)
class CohortConfig:
    ability_sd: float = 1.0
    logistic_slope: float = 2.2
    speed_log_sd: float = 0.20
    guess_range: tuple[float, float] = (0.01, 0.05)
    guess_success_prob: float = 0.25
    distraction_rate: float = 0.0013
    base_tts_log_mean: float = math.log(35.0)
    base_tts_log_sd: float = 0.30
    difficulty_sd: float = 1.0
    bonus_difficulty_shift: float = 1.2
    tts_skill_coef: float = 0.55
    tts_noise_sd: float = 0.30
    min_tts: float = 2.2


@dataclass(frozen=True)
class StudentProfile:
    student_id: str
    ability: float
    speed: float
    guess_propensity: float


@dataclass(frozen=True)
class ExerciseLatent:
    exercise_id: str
    difficulty: float
    base_log_tts: float


@dataclass(frozen=True)
class CohortInfo:
    profiles: dict[str, StudentProfile]
    latents: dict[str, ExerciseLatent]
    config: CohortConfig
    seed: int

    def analytic_cfa(self, student_id: str, exercise_id: str) -> float:
        """Closed-form success probability for a non-guessed attempt."""
        profile = self.profiles[student_id]
        latent = self.latents[exercise_id]
        gap = self.config.logistic_slope * (profile.ability - latent.difficulty)
        return 1.0 / (1.0 + math.exp(-gap))


def make_curriculum(
    n_exercises: int,
    seed: int = 0,
    bonus_fraction: float = 0.08,
    mandatory_fraction: float = 0.02,
    exercises_per_lu: int = 6,
    lus_per_topic: int = 3,
) -> Curriculum:
    """Synthetic catalog shaped like real course content: four sections,
    topics split into learning units, section-closing quizzes, and a sprinkle
    of bonus and mandatory exercises."""
    if n_exercises < 4:
        raise ValueError("need at least 4 exercises (one per section)")
    rng = np.random.default_rng(seed)
    types = ("multi_choice", "open", "cloze", "other")
    type_p = (0.5, 0.3, 0.15, 0.05)
    representations = ("pie", "lines", "other")
    repr_p = (0.4, 0.35, 0.25)
    goals = ("concepts", "implementation", "creativity")
    goal_p = (0.45, 0.35, 0.2)
    per_section = n_exercises // 4
    exercises = []
    for i in range(n_exercises):
        section = min(i // per_section, 3) + 1
        lu = i // exercises_per_lu
        topic = lu // lus_per_topic
        is_quiz = (i + 1) % per_section == 0 and i < per_section * 4
        exercises.append(
            Exercise(
                exercise_id=f"ex{i:04d}",
                section=section,
                topic=f"topic{topic:02d}",
                learning_unit=f"lu{lu:03d}",
                exercise_type=str(rng.choice(types, p=type_p)),
                representation=str(rng.choice(representations, p=repr_p)),
                goal=str(rng.choice(goals, p=goal_p)),
                is_bonus=bool(rng.random() < bonus_fraction) and not is_quiz,
                is_mandatory=is_quiz or bool(rng.random() < mandatory_fraction),
                is_quiz=is_quiz,
                baseline_index=i,
            )
        )
    return Curriculum.from_exercises(exercises)


def generate_cohort(
    n_students: int,
    curriculum: Curriculum,
    rng_seed: int = 0,
    config: CohortConfig = CohortConfig(),
    difficulties: Optional[dict[str, float]] = None,
) -> tuple[list[AttemptRecord], CohortInfo]:
    """Draw a full student-by-exercise attempt matrix.

    Per-exercise difficulty can be supplied; otherwise it is drawn normal
    with a shift for bonus exercises (they are harder than the baseline by
    design). Guessed attempts get a time below the guessing threshold and a
    chance-level outcome; everything else is floored just above it so a
    zero-propensity cohort contains no guess-range records.
    """
    if n_students < 1:
        raise ValueError("n_students must be >= 1")
    rng = np.random.default_rng(rng_seed)
    latents: dict[str, ExerciseLatent] = {}
    for ex in curriculum.exercises:
        if difficulties is not None and ex.exercise_id in difficulties:
            difficulty = difficulties[ex.exercise_id]
        else:
            difficulty = rng.normal(0.0, config.difficulty_sd)
            if ex.is_bonus:
                difficulty += config.bonus_difficulty_shift
        latents[ex.exercise_id] = ExerciseLatent(
            exercise_id=ex.exercise_id,
            difficulty=float(difficulty),
            base_log_tts=float(rng.normal(config.base_tts_log_mean, config.base_tts_log_sd)),
        )
    profiles: dict[str, StudentProfile] = {}
    records: list[AttemptRecord] = []
    for s in range(n_students):
        student_id = f"s{s:04d}"
        profile = StudentProfile(
            student_id=student_id,
            ability=float(rng.normal(0.0, config.ability_sd)),
            speed=float(math.exp(rng.normal(0.0, config.speed_log_sd))),
            guess_propensity=float(rng.uniform(*config.guess_range)),
        )
        profiles[student_id] = profile
        clock = float(rng.uniform(0, 3600))
        for ex in curriculum.exercises:
            latent = latents[ex.exercise_id]
            gap = profile.ability - latent.difficulty
            if rng.random() < profile.guess_propensity:
                tts = float(rng.uniform(0.5, GUESS_TTS_CEILING - 0.1))
                cfa = bool(rng.random() < config.guess_success_prob)
                attempts = 1 if cfa else int(rng.integers(2, 5))
            else:
                p_correct = 1.0 / (1.0 + math.exp(-config.logistic_slope * gap))
                cfa = bool(rng.random() < p_correct)
                log_tts = (
                    latent.base_log_tts
                    - config.tts_skill_coef * gap
                    + math.log(profile.speed)
                    + rng.normal(0.0, config.tts_noise_sd)
                )
                tts = max(float(math.exp(log_tts)), config.min_tts)
                if rng.random() < config.distraction_rate:
                    tts = float(rng.uniform(1500.0, 3000.0))
                attempts = 1 if cfa else int(rng.integers(2, 5))
            clock += tts + float(rng.uniform(1.0, 5.0))
            records.append(
                AttemptRecord(
                    student_id=student_id,
                    exercise_id=ex.exercise_id,
                    timestamp=clock,
                    correct_first_attempt=cfa,
                    time_to_success=tts,
                    attempt_count=attempts,
                )
            )
    info = CohortInfo(profiles=profiles, latents=latents, config=config, seed=rng_seed)
    return records, info


def split_cohort(
    events: Sequence[AttemptRecord], fraction: float = 0.5, seed: int = 0
) -> tuple[list[AttemptRecord], list[AttemptRecord]]:
    """Student-disjoint split: the first part is for model fitting, the
    second for policy evaluation."""
    students = sorted({r.student_id for r in events})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(students))
    cut = int(round(fraction * len(students)))
    first = {students[i] for i in order[:cut]}
    a = [r for r in events if r.student_id in first]
    b = [r for r in events if r.student_id not in first]
    return a, b


# ---------------------------------------------------------------------------
# Policy specifications


@dataclass(frozen=True)
class PolicySpec:
    kind: str  # random | benchmark | adaptive
    p: Optional[float] = None
    n: Optional[int] = None
    config: Optional[PolicyConfig] = None

    def __post_init__(self) -> None:
        if self.kind == "random":
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise ValueError("random policy needs p in [0, 1]")
        elif self.kind == "benchmark":
            if self.n is None or self.n < 1:
                raise ValueError("benchmark policy needs n >= 1")
        elif self.kind == "adaptive":
            if self.config is None:
                raise ValueError("adaptive policy needs a PolicyConfig")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "random":
            return f"random:{self.p:g}"
        if self.kind == "benchmark":
            return f"benchmark:{self.n}"
        return (
            f"adaptive:cfa>{self.config.cfa_skip_threshold:g},"
            f"tts<{self.config.tts_skip_ratio:g}x"
        )

    @staticmethod
    def random(p: float) -> "PolicySpec":
        return PolicySpec(kind="random", p=p)

    @staticmethod
    def benchmark(n: int) -> "PolicySpec":
        return PolicySpec(kind="benchmark", n=n)

    @staticmethod
    def adaptive(config: PolicyConfig) -> "PolicySpec":
        return PolicySpec(kind="adaptive", config=config)


# ---------------------------------------------------------------------------
# Replay


@dataclass
class StudentReplay:
    student_id: str
    skipped_exercise_ids: list[str] = field(default_factory=list)
    bad_skip_ids: list[str] = field(default_factory=list)
    served_exercise_ids: list[str] = field(default_factory=list)
    time_of_skipped: float = 0.0
    time_total: float = 0.0
    cfa_rate: float = 0.0

    @property
    def time_saved(self) -> float:
        return self.time_of_skipped / self.time_total if self.time_total > 0 else 0.0


@dataclass
class ReplayResult:
    policy_label: str
    seed: int
    per_student: dict[str, StudentReplay]
    fpr: float = 0.0
    fpr_defined: bool = False
    time_saved_fraction: float = 0.0


class MissingRecordError(ValueError):
    def __init__(self, student_id: str, exercise_id: str):
        super().__init__(
            f"replay needs the recorded outcome of every consulted cell; "
            f"missing student={student_id!r} exercise={exercise_id!r}"
        )


def _student_rng(seed: int, student_id: str) -> np.random.Generator:
    digest = hashlib.sha256(student_id.encode("utf-8")).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")])
    )


def fpr(result: ReplayResult) -> tuple[float, bool]:
    """Pooled bad-skip fraction; (0.0, False) when nothing was skipped."""
    skips = sum(len(s.skipped_exercise_ids) for s in result.per_student.values())
    if skips == 0:
        return 0.0, False
    bad = sum(len(s.bad_skip_ids) for s in result.per_student.values())
    return bad / skips, True


def time_saved(result: ReplayResult) -> float:
    """Mean over students of (skipped time / total time); students with no
    recorded time are excluded."""
    ratios = [s.time_saved for s in result.per_student.values() if s.time_total > 0]
    return float(np.mean(ratios)) if ratios else 0.0


def replay(
    events: Sequence[AttemptRecord],
    curriculum: Curriculum,
    policy: PolicySpec,
    cfa_model: Optional[ForestModel] = None,
    tts_model: Optional[ForestModel] = None,
    snapshot: Optional[FeatureStoreSnapshot] = None,
    rng_seed: int = 0,
    history_probe=None,
) -> ReplayResult:
    """Score one policy against recorded outcomes.

    ``history_probe(student_id, exercise_id)`` is called whenever a record
    enters the adaptive policy's feature inputs; tests use it to verify that
    skipped outcomes never leak into features.
    """
    if policy.kind == "adaptive" and (
        cfa_model is None or tts_model is None or snapshot is None
    ):
        raise ValueError("adaptive replay needs models and a snapshot")
    by_student = group_by_student(events)
    outcome: dict[str, dict[str, AttemptRecord]] = {
        sid: {r.exercise_id: r for r in recs} for sid, recs in by_student.items()
    }
    # Scoring statistics come from the replayed events themselves (ground
    # truth), independent of the model snapshot.
    tts_sum: dict[str, float] = {}
    tts_n: dict[str, int] = {}
    for rec in events:
        tts_sum[rec.exercise_id] = tts_sum.get(rec.exercise_id, 0.0) + rec.time_to_success
        tts_n[rec.exercise_id] = tts_n.get(rec.exercise_id, 0) + 1
    scoring_mean = {eid: tts_sum[eid] / tts_n[eid] for eid in tts_sum}

    cap = policy.config.max_consecutive_skips if policy.kind == "adaptive" else 5
    per_student: dict[str, StudentReplay] = {}
    for student_id in sorted(by_student):
        rng = _student_rng(rng_seed, student_id)
        row = StudentReplay(student_id=student_id)
        records = outcome[student_id]
        history = StudentHistory() if policy.kind == "adaptive" else None
        streak = 0
        consecutive = 0
        n_correct = 0
        for ex in curriculum.exercises:
            rec = records.get(ex.exercise_id)
            if rec is None:
                raise MissingRecordError(student_id, ex.exercise_id)
            row.time_total += rec.time_to_success
            n_correct += 1 if rec.correct_first_attempt else 0
            skip = False
            if policy.kind == "random":
                skip = bool(rng.random() < policy.p)
            elif policy.kind == "benchmark":
                skip = streak >= policy.n
            else:
                # Mandatory flags and the consecutive-skip cap are engine
                # mechanics; the baseline comparators are pure chance/streak
                # rules.
                if not ex.is_mandatory and consecutive < cap:
                    cfg = policy.config
                    pred = Predictions(
                        cfa_prob=predict_cfa(
                            cfa_model,
                            compute_features(
                                history, snapshot, ex, "cfa_model",
                                cfa_model.selected_features,
                            ),
                        ),
                        tts_seconds=predict_tts(
                            tts_model,
                            compute_features(
                                history, snapshot, ex, "tts_model",
                                tts_model.selected_features,
                            ),
                        ),
                    )
                    stats = snapshot.per_exercise.get(ex.exercise_id)
                    tts_mean = (
                        stats.tts_mean
                        if stats is not None and stats.n_observations > 0
                        else None
                    )
                    zone = classify_zpd(pred, tts_mean, ex.is_bonus, cfg)
                    if zone != ZONE_WITHIN:
                        skip = not (
                            cfg.exploration_rate > 0
                            and bool(rng.random() < cfg.exploration_rate)
                        )
            if skip and policy.kind == "benchmark":
                streak = 0  # one skip per earned streak
            if skip:
                row.skipped_exercise_ids.append(ex.exercise_id)
                row.time_of_skipped += rec.time_to_success
                consecutive += 1
                bad = (not rec.correct_first_attempt) or (
                    rec.time_to_success > scoring_mean[ex.exercise_id]
                )
                if bad:
                    row.bad_skip_ids.append(ex.exercise_id)
            else:
                row.served_exercise_ids.append(ex.exercise_id)
                consecutive = 0
                if policy.kind == "benchmark":
                    streak = streak + 1 if rec.correct_first_attempt else 0
                if history is not None:
                    if history_probe is not None:
                        history_probe(student_id, ex.exercise_id)
                    history.append(rec, ex)
        row.cfa_rate = n_correct / len(curriculum) if len(curriculum) else 0.0
        per_student[student_id] = row
    result = ReplayResult(
        policy_label=policy.label, seed=rng_seed, per_student=per_student
    )
    result.fpr, result.fpr_defined = fpr(result)
    result.time_saved_fraction = time_saved(result)
    return result


# ---------------------------------------------------------------------------
# Frontier sweep and personalization curve


@dataclass(frozen=True)
class SweepPoint:
    policy_kind: str
    label: str
    fpr: float
    time_saved: float


def frontier_sweep(
    events: Sequence[AttemptRecord],
    curriculum: Curriculum,
    specs: Iterable[PolicySpec],
    cfa_model: Optional[ForestModel] = None,
    tts_model: Optional[ForestModel] = None,
    snapshot: Optional[FeatureStoreSnapshot] = None,
    rng_seed: int = 0,
) -> list[SweepPoint]:
    """One replay per policy specification, sorted by FPR."""
    points = []
    for spec in specs:
        result = replay(
            events, curriculum, spec,
            cfa_model=cfa_model, tts_model=tts_model, snapshot=snapshot,
            rng_seed=rng_seed,
        )
        points.append(
            SweepPoint(
                policy_kind=spec.kind,
                label=spec.label,
                fpr=result.fpr,
                time_saved=result.time_saved_fraction,
            )
        )
    return sorted(points, key=lambda pt: (pt.fpr, pt.time_saved))


def sweep_to_csv(points: Sequence[SweepPoint]) -> str:
    lines = ["policy,param,fpr,time_saved"]
    for pt in points:
        kind, _, param = pt.label.partition(":")
        lines.append(f"{kind},{param},{pt.fpr:.6f},{pt.time_saved:.6f}")
    return "\n".join(lines) + "\n"


def pareto_envelope(points: Sequence[SweepPoint]) -> list[tuple[float, float]]:
    """Best time-saved per FPR level: increasing in fpr, non-decreasing in
    time saved (dominated points removed)."""
    ordered = sorted(points, key=lambda pt: (pt.fpr, pt.time_saved))
    envelope: list[tuple[float, float]] = []
    best = -math.inf
    for pt in ordered:
        if pt.time_saved > best:
            best = pt.time_saved
            envelope.append((pt.fpr, pt.time_saved))
    return envelope


def matched_fpr_violations(
    candidate: Sequence[SweepPoint],
    other: Sequence[SweepPoint],
    fpr_cap: float = 0.10,
) -> int:
    """Count candidate points (fpr <= cap) beaten by the other family's
    envelope at the same FPR.

    Comparison happens only inside the other family's observed FPR range;
    a level the other family cannot reach at all is a vacuous win.
    """
    env = pareto_envelope(other)
    if not env:
        return 0
    xs = [e[0] for e in env]
    ys = [e[1] for e in env]
    violations = 0
    for pt in candidate:
        if pt.fpr > fpr_cap:
            continue
        if pt.fpr < xs[0] or pt.fpr > xs[-1]:
            continue
        other_ts = float(np.interp(pt.fpr, xs, ys))
        if pt.time_saved < other_ts - 1e-12:
            violations += 1
    return violations


def personalization_curve(result: ReplayResult) -> list[tuple[int, str, float]]:
    """(rank, student, time saved), ranked by overall first-attempt success
    rate, weakest student first."""
    rows = sorted(
        result.per_student.values(), key=lambda s: (s.cfa_rate, s.student_id)
    )
    return [(rank, s.student_id, s.time_saved) for rank, s in enumerate(rows)]


def bin_curve(
    curve: Sequence[tuple[int, str, float]], n_bins: int = 5
) -> list[tuple[int, float]]:
    """Mean time saved per rank bin (bin 0 = weakest students)."""
    if not curve:
        return []
    bins: dict[int, list[float]] = {}
    n = len(curve)
    for rank, _, ts in curve:
        b = min(rank * n_bins // n, n_bins - 1)
        bins.setdefault(b, []).append(ts)
    return [(b, float(np.mean(vals))) for b, vals in sorted(bins.items())]


def curve_to_csv(binned: Sequence[tuple[int, float]]) -> str:
    lines = ["rank_bin,time_saved_mean"]
    for b, ts in binned:
        lines.append(f"{b},{ts:.6f}")
    return "\n".join(lines) + "\n"
