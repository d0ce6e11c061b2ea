"""Deployment shell: HTTP service around the sequencing engine.

The content delivery system posts progress updates (one attempt record per
solved exercise) and asks for the next exercise to deliver. Everything the
engine needs to resume after a restart lives in two append-only JSONL logs:
the event log (attempt records, written durably before any acknowledgment)
and the trace log (per-request decision traces). Session state is folded
from those logs at startup, so a crash after an acknowledgment never loses
the acknowledged record.

Population features refresh on a schedule (weekly in deployment) or on
demand via the admin endpoint; the new snapshot is swapped in atomically and
every decision trace records exactly one snapshot version.

Only an opaque student id crosses the service boundary: requests, responses
and logs carry no personally identifying fields.
"""
from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .catalog import (
    AttemptRecord,
    Curriculum,
    load_curriculum,
    load_events,
    record_from_dict,
    record_to_json,
)
from .features import FeatureStoreSnapshot, build_snapshot, load_snapshot
from .models import ForestModel, load_model
from .policy import (
    DRAW_VERDICTS,
    Decision,
    PolicyConfig,
    SessionState,
    apply_decisions,
    load_policy_config,
    next_exercise,
    record_outcome,
)

DEFAULT_REFRESH_INTERVAL_SEC = 7 * 24 * 3600.0


@dataclass(frozen=True)
class ServiceConfig:
    listen_address: str
    curriculum_path: str
    cfa_model_path: str
    tts_model_path: str
    snapshot_path: str
    policy_config_path: str
    event_log_path: str
    trace_log_path: str
    refresh_interval_sec: float = DEFAULT_REFRESH_INTERVAL_SEC

    def __post_init__(self) -> None:
        if self.refresh_interval_sec <= 0:
            raise ValueError("refresh_interval_sec must be positive")


def load_service_config(path) -> ServiceConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ServiceConfig(**json.load(fh))


class RequestError(ValueError):
    """Client-side problem; maps to a 4xx response."""

    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


class EngineService:
    """Sequencing engine with durable logs and per-student serialization.

    Requests for distinct students proceed concurrently against the shared
    immutable models and snapshot; requests for one student are serialized
    by a per-student lock.
    """

    def __init__(
        self,
        curriculum: Curriculum,
        cfa_model: ForestModel,
        tts_model: ForestModel,
        snapshot: FeatureStoreSnapshot,
        policy_config: PolicyConfig,
        event_log_path,
        trace_log_path,
    ) -> None:
        self.curriculum = curriculum
        self.cfa_model = cfa_model
        self.tts_model = tts_model
        self.snapshot = snapshot
        self.policy_config = policy_config
        self.event_log_path = Path(event_log_path)
        self.trace_log_path = Path(trace_log_path)
        self._sessions: dict[str, SessionState] = {}
        self._last_recommendation: dict[str, dict] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._event_seq = 0
        self._trace_seq: dict[str, int] = {}
        self.rebuild_sessions()

    @classmethod
    def from_config(cls, cfg: ServiceConfig) -> "EngineService":
        for path in (
            cfg.curriculum_path,
            cfg.cfa_model_path,
            cfg.tts_model_path,
            cfg.snapshot_path,
            cfg.policy_config_path,
        ):
            if not Path(path).exists():
                raise FileNotFoundError(f"required file missing at startup: {path}")
        with open(cfg.curriculum_path, "rb") as fh:
            fmt = "jsonl" if cfg.curriculum_path.endswith(".jsonl") else "csv"
            curriculum = load_curriculum(fh, fmt=fmt)
        return cls(
            curriculum=curriculum,
            cfa_model=load_model(cfg.cfa_model_path),
            tts_model=load_model(cfg.tts_model_path),
            snapshot=load_snapshot(cfg.snapshot_path),
            policy_config=load_policy_config(cfg.policy_config_path),
            event_log_path=cfg.event_log_path,
            trace_log_path=cfg.trace_log_path,
        )

    # -- per-student serialization ------------------------------------

    def _lock_for(self, student_id: str) -> threading.Lock:
        with self._registry_lock:
            lock = self._locks.get(student_id)
            if lock is None:
                lock = threading.Lock()
                self._locks[student_id] = lock
            return lock

    def _session_for(self, student_id: str) -> SessionState:
        session = self._sessions.get(student_id)
        if session is None:
            session = SessionState(student_id, base_seed=self.policy_config.rng_seed)
            self._sessions[student_id] = session
        return session

    # -- durable logging ------------------------------------------------

    def _append_line(self, path: Path, line: str) -> None:
        with self._log_lock:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    # -- request handlers ------------------------------------------------

    def handle_next(self, student_id: str) -> dict:
        """Recommend the next exercise; repeated calls before the outcome
        arrives return the same recommendation."""
        if not student_id:
            raise RequestError("student_id is required", status=422)
        with self._lock_for(student_id):
            session = self._session_for(student_id)
            if session.awaiting_outcome:
                return self._last_recommendation[student_id]
            snapshot = self.snapshot  # one version per trace, even mid-refresh
            served, decisions = next_exercise(
                session,
                self.curriculum,
                snapshot,
                self.cfa_model,
                self.tts_model,
                self.policy_config,
            )
            seq = self._trace_seq.get(student_id, 0)
            self._trace_seq[student_id] = seq + 1
            trace_id = f"{student_id}:{seq}"
            trace_line = json.dumps(
                {
                    "trace_id": trace_id,
                    "student_id": student_id,
                    "seq": seq,
                    "snapshot_version": snapshot.version,
                    "served_exercise_id": None if served is None else served.exercise_id,
                    "decisions": [d.to_dict() for d in decisions],
                },
                sort_keys=True,
            )
            self._append_line(self.trace_log_path, trace_line)
            if served is None:
                response = {"end_of_curriculum": True, "trace_id": trace_id}
            else:
                response = {
                    "exercise_id": served.exercise_id,
                    "verdict": decisions[-1].verdict if decisions else "serve",
                    "trace_id": trace_id,
                }
            self._last_recommendation[student_id] = response
            return response

    def handle_event(self, payload: dict) -> dict:
        """Durably append one attempt record, then update the session."""
        try:
            record = record_from_dict(payload)
        except (KeyError, TypeError, ValueError) as exc:
            raise RequestError(f"malformed event: {exc}", status=422) from None
        if record.exercise_id not in self.curriculum.by_id:
            raise RequestError(f"unknown exercise {record.exercise_id!r}", status=404)
        if record.time_to_success <= 0:
            raise RequestError("time_to_success must be positive", status=422)
        with self._lock_for(record.student_id):
            session = self._sessions.get(record.student_id)
            if session is None or not session.awaiting_outcome:
                raise RequestError(
                    "no exercise awaiting an outcome for this student", status=409
                )
            expected = self.curriculum.exercises[session.cursor]
            if record.exercise_id != expected.exercise_id:
                raise RequestError(
                    f"expected outcome for {expected.exercise_id!r}", status=409
                )
            with self._log_lock:
                seq = self._event_seq
                self._event_seq += 1
            self._append_line(self.event_log_path, record_to_json(record, seq=seq))
            record_outcome(session, record, self.curriculum)
            return {"ack": True, "seq": seq}

    def health(self) -> dict:
        return {
            "status": "ok",
            "snapshot_version": self.snapshot.version,
            "curriculum_size": len(self.curriculum),
            "active_sessions": len(self._sessions),
        }

    # -- feature refresh ------------------------------------------------

    def refresh_job(self) -> int:
        """Rebuild the snapshot from the event log and publish it atomically.

        On any failure the previous snapshot stays in place.
        """
        old = self.snapshot
        try:
            events = self._read_event_log()
            new_snapshot = build_snapshot(
                events, self.curriculum, version=old.version + 1
            )
        except Exception:
            return old.version
        self.snapshot = new_snapshot  # atomic reference swap
        return new_snapshot.version

    def start_refresh_thread(self, interval_sec: float) -> threading.Thread:
        def loop() -> None:
            while True:
                time.sleep(interval_sec)
                self.refresh_job()

        thread = threading.Thread(target=loop, daemon=True, name="snapshot-refresh")
        thread.start()
        return thread

    # -- log-driven reconstruction ----------------------------------------

    def _read_event_log(self) -> list[AttemptRecord]:
        if not self.event_log_path.exists():
            return []
        # The standard loader normalizes ordering (grouped by student,
        # sorted by timestamp), so an offline rebuild over the same log is
        # reproducible down to float summation order.
        with open(self.event_log_path, "rb") as fh:
            records, _ = load_events(fh, self.curriculum)
        return records

    def rebuild_sessions(self) -> None:
        """Fold the trace and event logs back into per-student sessions.

        Traces carry the decision effects (cursor, served set, skip runs,
        consumed exploration draws); events carry outcomes and rollback
        triggers. Each trace is paired with the event that answered it; a
        trailing unanswered trace leaves the session awaiting its outcome.
        """
        traces: dict[str, list[dict]] = {}
        if self.trace_log_path.exists():
            with open(self.trace_log_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    doc = json.loads(line)
                    traces.setdefault(doc["student_id"], []).append(doc)
        events: dict[str, list[dict]] = {}
        if self.event_log_path.exists():
            with open(self.event_log_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        doc = json.loads(line)
                        events.setdefault(doc["student_id"], []).append(doc)
        self._sessions = {}
        self._last_recommendation = {}
        self._trace_seq = {}
        self._event_seq = sum(len(v) for v in events.values())
        for student_id in sorted(set(traces) | set(events)):
            session = SessionState(student_id, base_seed=self.policy_config.rng_seed)
            student_traces = sorted(traces.get(student_id, []), key=lambda t: t["seq"])
            student_events = events.get(student_id, [])
            draws = 0
            event_i = 0
            for trace in student_traces:
                decisions = [
                    Decision(
                        exercise_id=d["exercise_id"],
                        verdict=d["verdict"],
                        cfa_prob=d["cfa_prob"],
                        tts_seconds=d["tts_seconds"],
                        thresholds_applied=d["thresholds_applied"],
                        snapshot_version=d["snapshot_version"],
                    )
                    for d in trace["decisions"]
                ]
                draws += sum(1 for d in decisions if d.verdict in DRAW_VERDICTS)
                served_id = trace["served_exercise_id"]
                served_index = (
                    None
                    if served_id is None
                    else self.curriculum.by_id[served_id].baseline_index
                )
                apply_decisions(session, self.curriculum, decisions, served_index)
                if served_index is None:
                    continue
                if event_i < len(student_events):
                    event = student_events[event_i]
                    if event["exercise_id"] == served_id:
                        event_i += 1
                        record_outcome(session, record_from_dict(event), self.curriculum)
                if session.awaiting_outcome:
                    served = self.curriculum.exercises[served_index]
                    self._last_recommendation[student_id] = {
                        "exercise_id": served.exercise_id,
                        "verdict": decisions[-1].verdict if decisions else "serve",
                        "trace_id": trace["trace_id"],
                    }
            session._replay_draws(draws)
            self._sessions[student_id] = session
            self._trace_seq[student_id] = (
                student_traces[-1]["seq"] + 1 if student_traces else 0
            )

    def session_state(self, student_id: str) -> Optional[dict]:
        session = self._sessions.get(student_id)
        return None if session is None else session.state_dict()


def create_app(service: EngineService) -> FastAPI:
    """FastAPI wiring around an engine instance."""
    app = FastAPI(title="zpdseq", docs_url=None, redoc_url=None)
    app.state.service = service

    @app.exception_handler(RequestError)
    async def _request_error(_: Request, exc: RequestError):
        return JSONResponse(status_code=exc.status, content={"error": str(exc)})

    @app.get("/v1/health")
    def health():
        return service.health()

    @app.get("/v1/next/{student_id}")
    def next_for_student(student_id: str):
        return service.handle_next(student_id)

    @app.post("/v1/events")
    async def post_event(request: Request):
        try:
            payload = await request.json()
        except Exception:
            raise RequestError("body must be JSON", status=422) from None
        if not isinstance(payload, dict):
            raise RequestError("body must be a JSON object", status=422)
        return service.handle_event(payload)

    @app.post("/v1/admin/refresh")
    def refresh():
        return {"snapshot_version": service.refresh_job()}

    return app
