"""Skipping policy: ZPD classification and the per-student session engine.

An exercise is skipped when the predictions place it outside the student's
zone of proximal development:

* a regular exercise is *below* the zone (too easy) when the predicted
  probability of first-attempt success is above ``cfa_skip_threshold`` AND
  the predicted time to success is under ``tts_skip_ratio`` times the
  exercise's population mean time;
* a bonus (deliberately harder) exercise is additionally *above* the zone
  (too hard) when the predicted success probability falls below
  ``bonus_cfa_floor`` OR the predicted time exceeds ``bonus_tts_ratio``
  times the population mean.

Equality never skips: ties are resolved toward serving content.

The session engine examines the next ``lookahead`` candidates in baseline
order per request and serves the first one it decides not to skip, with four
overrides: mandatory exercises are always served, a skip recommendation is
overridden with probability ``exploration_rate`` (so the training data stays
representative of the population), at most ``max_consecutive_skips``
exercises are skipped in a row, and when the exercise served after a skip
run is answered incorrectly at first attempt the student is sent back to the
start of the skipped run and proceeds linearly until passing the position of
the failure.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .catalog import AttemptRecord, Curriculum, Exercise
from .features import FeatureStoreSnapshot, StudentHistory, compute_features
from .models import ForestModel, predict_cfa, predict_tts

ZONE_BELOW = "below_zpd"
ZONE_WITHIN = "within_zpd"
ZONE_ABOVE = "above_zpd"

VERDICT_SERVE = "serve"
VERDICT_SKIP_TOO_EASY = "skip_too_easy"
VERDICT_SKIP_TOO_HARD_BONUS = "skip_too_hard_bonus"
VERDICT_SERVE_MANDATORY = "serve_mandatory"
VERDICT_SERVE_EXPLORATION = "serve_exploration"
VERDICT_SERVE_ROLLBACK = "serve_rollback"

SKIP_VERDICTS = (VERDICT_SKIP_TOO_EASY, VERDICT_SKIP_TOO_HARD_BONUS)
# Verdicts that consumed one exploration draw (every skip-recommended
# candidate draws exactly once).
DRAW_VERDICTS = (VERDICT_SKIP_TOO_EASY, VERDICT_SKIP_TOO_HARD_BONUS, VERDICT_SERVE_EXPLORATION)


@dataclass(frozen=True)
class PolicyConfig:
    """Skipping-policy parameters.

    The shipped defaults are the operating point of the offline frontier
    sweep on the bundled synthetic cohort, chosen for a false-positive rate
    under 10% while saving as much time as possible (see the evaluation
    utilities in :mod:`zpdseq.simulator`).
    """

    cfa_skip_threshold: float = 0.90
    tts_skip_ratio: float = 0.85
    bonus_cfa_floor: float = 0.25
    bonus_tts_ratio: float = 1.75
    exploration_rate: float = 0.10
    lookahead: int = 5
    max_consecutive_skips: int = 5
    rng_seed: int = 0
    # Absolute-seconds alternatives to the ratio thresholds; None keeps the
    # ratio semantics.
    tts_skip_seconds: Optional[float] = None
    bonus_tts_seconds: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("cfa_skip_threshold", "bonus_cfa_floor", "exploration_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.tts_skip_ratio <= 0 or self.bonus_tts_ratio <= 0:
            raise ValueError("TTS ratios must be positive")
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.max_consecutive_skips < 1:
            raise ValueError("max_consecutive_skips must be >= 1")


def policy_config_to_json(cfg: PolicyConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


def policy_config_from_json(text: str) -> PolicyConfig:
    return PolicyConfig(**json.loads(text))


def load_policy_config(path) -> PolicyConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return policy_config_from_json(fh.read())


@dataclass(frozen=True)
class Predictions:
    cfa_prob: float
    tts_seconds: float


def classify_zpd(
    pred: Predictions,
    tts_mean: Optional[float],
    is_bonus: bool,
    cfg: PolicyConfig,
) -> str:
    """Zone of one candidate exercise given the model predictions.

    Without a population mean time for the exercise there is nothing to
    compare the TTS prediction against, so the candidate defaults to within
    the zone (served). Regular exercises are never above the zone: the
    baseline path is assumed reachable for every student.
    """
    if tts_mean is None or tts_mean <= 0:
        return ZONE_WITHIN
    easy_cutoff = (
        cfg.tts_skip_seconds
        if cfg.tts_skip_seconds is not None
        else cfg.tts_skip_ratio * tts_mean
    )
    if is_bonus:
        hard_cutoff = (
            cfg.bonus_tts_seconds
            if cfg.bonus_tts_seconds is not None
            else cfg.bonus_tts_ratio * tts_mean
        )
        if pred.cfa_prob < cfg.bonus_cfa_floor or pred.tts_seconds > hard_cutoff:
            return ZONE_ABOVE
    if pred.cfa_prob > cfg.cfa_skip_threshold and pred.tts_seconds < easy_cutoff:
        return ZONE_BELOW
    return ZONE_WITHIN


def should_explore(rng: np.random.Generator, rate: float) -> bool:
    """One exploration draw; consumes exactly one uniform variate."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"exploration rate must be in [0, 1], got {rate}")
    return rng.random() < rate


@dataclass(frozen=True)
class Decision:
    exercise_id: str
    verdict: str
    cfa_prob: Optional[float]
    tts_seconds: Optional[float]
    thresholds_applied: dict
    snapshot_version: int

    def to_dict(self) -> dict:
        return {
            "exercise_id": self.exercise_id,
            "verdict": self.verdict,
            "cfa_prob": self.cfa_prob,
            "tts_seconds": self.tts_seconds,
            "thresholds_applied": self.thresholds_applied,
            "snapshot_version": self.snapshot_version,
        }


def _session_seed(base_seed: int, student_id: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(student_id.encode("utf-8")).digest()
    return np.random.SeedSequence([base_seed, int.from_bytes(digest[:8], "big")])


class SessionState:
    """Mutable per-student sequencing state.

    Owned by exactly one request sequence at a time; callers serialize
    concurrent access per student. The exploration generator is seeded from
    (base seed, student id) and its consumed-draw count is tracked, so a
    session rebuilt from logs resumes with an identical random stream.
    """

    def __init__(self, student_id: str, base_seed: int = 0) -> None:
        self.student_id = student_id
        self.base_seed = base_seed
        self.cursor = -1
        self.pending_rollback_target: Optional[int] = None
        self.linear_until: Optional[int] = None
        self.last_skip_block: tuple[int, ...] = ()
        self.served_indices: set[int] = set()
        self.served_ids: set[str] = set()
        self.history = StudentHistory()
        self.rng_draws = 0
        self.awaiting_outcome = False
        self._rng = np.random.default_rng(_session_seed(base_seed, student_id))

    def explore(self, rate: float) -> bool:
        self.rng_draws += 1
        return should_explore(self._rng, rate)

    def _replay_draws(self, draws: int) -> None:
        self.rng_draws = draws
        for _ in range(draws):
            self._rng.random()

    def state_dict(self) -> dict:
        """Comparable summary of everything that affects future decisions."""
        return {
            "student_id": self.student_id,
            "cursor": self.cursor,
            "pending_rollback_target": self.pending_rollback_target,
            "linear_until": self.linear_until,
            "last_skip_block": list(self.last_skip_block),
            "served_indices": sorted(self.served_indices),
            "rng_draws": self.rng_draws,
            "awaiting_outcome": self.awaiting_outcome,
            "history_len": self.history.n_records,
        }


def _mark_served(session: SessionState, index: int, exercise: Exercise) -> None:
    session.cursor = index
    session.served_indices.add(index)
    session.served_ids.add(exercise.exercise_id)
    session.awaiting_outcome = True


def _next_unserved(session: SessionState, curriculum: Curriculum, after: int) -> Optional[int]:
    for idx in range(after + 1, len(curriculum)):
        if idx not in session.served_indices:
            return idx
    return None


def apply_decisions(
    session: SessionState,
    curriculum: Curriculum,
    decisions: Sequence[Decision],
    served_index: Optional[int],
) -> None:
    """Fold one request's decisions into the session state.

    This is the single source of truth for state transitions: the live
    engine calls it after deciding, and log-driven session reconstruction
    calls it with decisions read back from the trace log.
    """
    skipped_run: list[int] = []
    for d in decisions:
        if d.verdict in SKIP_VERDICTS:
            skipped_run.append(curriculum.by_id[d.exercise_id].baseline_index)
    if served_index is None:
        # Curriculum exhausted (possibly with trailing skips); nothing to
        # serve and no block to remember.
        session.awaiting_outcome = False
        return
    exercise = curriculum.exercises[served_index]
    verdict = decisions[-1].verdict if decisions else VERDICT_SERVE
    if verdict == VERDICT_SERVE_ROLLBACK:
        if session.pending_rollback_target == served_index:
            session.pending_rollback_target = None
    else:
        if session.linear_until is not None and served_index > session.linear_until:
            session.linear_until = None
    session.last_skip_block = tuple(skipped_run)
    _mark_served(session, served_index, exercise)


def _predict(
    session: SessionState,
    snapshot: FeatureStoreSnapshot,
    exercise: Exercise,
    cfa_model: ForestModel,
    tts_model: ForestModel,
) -> Predictions:
    fv_cfa = compute_features(
        session.history, snapshot, exercise, "cfa_model", cfa_model.selected_features
    )
    fv_tts = compute_features(
        session.history, snapshot, exercise, "tts_model", tts_model.selected_features
    )
    return Predictions(
        cfa_prob=predict_cfa(cfa_model, fv_cfa),
        tts_seconds=predict_tts(tts_model, fv_tts),
    )


def next_exercise(
    session: SessionState,
    curriculum: Curriculum,
    snapshot: FeatureStoreSnapshot,
    cfa_model: ForestModel,
    tts_model: ForestModel,
    cfg: PolicyConfig,
) -> tuple[Optional[Exercise], list[Decision]]:
    """Decide the next exercise for a student.

    Returns the served exercise (None when the curriculum is exhausted) and
    the trace of one decision per examined exercise. Mutates the session via
    :func:`apply_decisions`.
    """
    if session.awaiting_outcome:
        raise ValueError(
            "session has an unanswered exercise; record its outcome before "
            "requesting the next one"
        )
    version = snapshot.version
    thresholds = {
        "cfa_skip_threshold": cfg.cfa_skip_threshold,
        "tts_skip_ratio": cfg.tts_skip_ratio,
        "bonus_cfa_floor": cfg.bonus_cfa_floor,
        "bonus_tts_ratio": cfg.bonus_tts_ratio,
    }

    def _decision(exercise: Exercise, verdict: str, pred: Optional[Predictions]) -> Decision:
        return Decision(
            exercise_id=exercise.exercise_id,
            verdict=verdict,
            cfa_prob=None if pred is None else pred.cfa_prob,
            tts_seconds=None if pred is None else pred.tts_seconds,
            thresholds_applied=thresholds,
            snapshot_version=version,
        )

    def _finish(index: Optional[int], decisions: list[Decision]):
        apply_decisions(session, curriculum, decisions, index)
        served = None if index is None else curriculum.exercises[index]
        return served, decisions

    # Rollback repair: jump back to the start of the skipped run, then move
    # linearly (no policy) until past the position of the failed exercise.
    if session.pending_rollback_target is not None:
        idx = session.pending_rollback_target
        return _finish(idx, [_decision(curriculum.exercises[idx], VERDICT_SERVE_ROLLBACK, None)])
    if session.linear_until is not None:
        idx = _next_unserved(session, curriculum, session.cursor)
        if idx is not None and idx <= session.linear_until:
            return _finish(idx, [_decision(curriculum.exercises[idx], VERDICT_SERVE_ROLLBACK, None)])
        session.linear_until = None  # repair complete, policy resumes

    decisions: list[Decision] = []
    skips = 0
    idx = session.cursor
    for _ in range(cfg.lookahead):
        idx = _next_unserved(session, curriculum, idx)
        if idx is None:
            return _finish(None, decisions)
        exercise = curriculum.exercises[idx]
        pred = _predict(session, snapshot, exercise, cfa_model, tts_model)
        if exercise.is_mandatory:
            decisions.append(_decision(exercise, VERDICT_SERVE_MANDATORY, pred))
            return _finish(idx, decisions)
        stats = snapshot.per_exercise.get(exercise.exercise_id)
        tts_mean = stats.tts_mean if stats is not None and stats.n_observations > 0 else None
        zone = classify_zpd(pred, tts_mean, exercise.is_bonus, cfg)
        if zone == ZONE_WITHIN:
            decisions.append(_decision(exercise, VERDICT_SERVE, pred))
            return _finish(idx, decisions)
        if skips >= cfg.max_consecutive_skips:
            decisions.append(_decision(exercise, VERDICT_SERVE, pred))
            return _finish(idx, decisions)
        if session.explore(cfg.exploration_rate):
            decisions.append(_decision(exercise, VERDICT_SERVE_EXPLORATION, pred))
            return _finish(idx, decisions)
        verdict = VERDICT_SKIP_TOO_EASY if zone == ZONE_BELOW else VERDICT_SKIP_TOO_HARD_BONUS
        decisions.append(_decision(exercise, verdict, pred))
        skips += 1
    # Every candidate in the window was skipped: serve whatever follows.
    idx = _next_unserved(session, curriculum, idx)
    if idx is None:
        return _finish(None, decisions)
    decisions.append(_decision(curriculum.exercises[idx], VERDICT_SERVE, None))
    return _finish(idx, decisions)


def record_outcome(
    session: SessionState, attempt: AttemptRecord, curriculum: Curriculum
) -> SessionState:
    """Fold one answered exercise into the session.

    If the answered exercise followed a skipped run and the first attempt
    was wrong, the skip was bad: schedule a rollback to the first exercise
    of that run. A correct answer clears the run.
    """
    if not session.awaiting_outcome or session.cursor < 0:
        raise ValueError("no exercise is awaiting an outcome for this session")
    expected = curriculum.exercises[session.cursor]
    if attempt.exercise_id != expected.exercise_id:
        raise ValueError(
            f"out-of-order attempt: expected outcome for {expected.exercise_id!r}, "
            f"got {attempt.exercise_id!r}"
        )
    session.history.append(attempt, expected)
    session.awaiting_outcome = False
    if session.last_skip_block and not attempt.correct_first_attempt:
        session.pending_rollback_target = session.last_skip_block[0]
        session.linear_until = session.cursor
    session.last_skip_block = ()
    return session
