"""Adaptive exercise sequencing around the zone of proximal development.

Predicts, per student and candidate exercise, the probability of a correct
first attempt and the time to success, skips exercises that fall outside
the student's current zone, and ships the offline evaluation harness and
analysis toolkit used to tune and validate the policy.
"""

__version__ = "0.1.0"

from .catalog import AttemptRecord, Curriculum, Exercise, load_curriculum, load_events
from .features import (
    FeatureStoreSnapshot,
    StudentHistory,
    build_snapshot,
    compute_features,
    enumerate_feature_grid,
)
from .models import ForestModel, predict_cfa, predict_tts, rfe_select, train_forest
from .policy import PolicyConfig, SessionState, classify_zpd, next_exercise, record_outcome
from .simulator import PolicySpec, generate_cohort, make_curriculum, replay

__all__ = [
    "AttemptRecord",
    "Curriculum",
    "Exercise",
    "FeatureStoreSnapshot",
    "ForestModel",
    "PolicyConfig",
    "PolicySpec",
    "SessionState",
    "StudentHistory",
    "build_snapshot",
    "classify_zpd",
    "compute_features",
    "enumerate_feature_grid",
    "generate_cohort",
    "load_curriculum",
    "load_events",
    "make_curriculum",
    "next_exercise",
    "predict_cfa",
    "predict_tts",
    "record_outcome",
    "replay",
    "rfe_select",
    "train_forest",
]
