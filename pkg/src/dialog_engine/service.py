"""HTTP session service over the engine.

    POST /session                -> {"session_id": ...}
    GET  /session/{id}           -> full session with per-turn trace
    POST /session/{id}/turn      -> TurnResult JSON
         body {"text": str, "override_source"?: database|explicit|implicit,
               "override_query"?: str}
    GET  /healthz

Turns within a session are serialized; a second in-flight turn is rejected
with 409. Every accepted event is appended to an ndjson session log so a
restarted service can replay its sessions.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .core import Role, Session, append_turn
from .engine import Engine, EngineConfig, TurnResult, run_turn
from .errors import EngineError, ProviderUnavailable

log = logging.getLogger(__name__)


class TurnRequest(BaseModel):
    text: str
    override_source: Optional[str] = None
    override_query: Optional[str] = None


class SessionStore:
    """In-memory sessions with an append-only ndjson event log."""

    def __init__(self, log_path: Optional[str | Path] = None):
        self.log_path = Path(log_path) if log_path else None
        self.sessions: dict[str, Session] = {}
        self.results: dict[str, list[dict]] = {}
        self.locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        if self.log_path and self.log_path.exists():
            self._replay_log()

    def _replay_log(self) -> None:
        assert self.log_path is not None
        for line in self.log_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            kind = event.get("event")
            sid = event.get("session_id")
            if kind == "session_created":
                self.sessions[sid] = Session(sid, created_at=event.get("created_at", 0.0))
                self.results[sid] = []
            elif kind == "turn_appended" and sid in self.sessions:
                self.sessions[sid] = append_turn(
                    self.sessions[sid], Role(event["role"]), event["text"]
                )
            elif kind == "turn_result" and sid in self.results:
                self.results[sid].append(event["result"])
        log.info("replayed %d sessions from %s", len(self.sessions), self.log_path)

    def _append_event(self, event: dict) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event) + "\n")

    def create(self) -> Session:
        session = Session.new()
        with self._registry_lock:
            self.sessions[session.session_id] = session
            self.results[session.session_id] = []
            self.locks[session.session_id] = threading.Lock()
        self._append_event(
            {
                "event": "session_created",
                "session_id": session.session_id,
                "created_at": session.created_at,
            }
        )
        return session

    def get(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise HTTPException(status_code=404, detail="no such session")

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self.locks.setdefault(session_id, threading.Lock())

    def record_turn(self, session: Session, user_text: str, result: TurnResult) -> None:
        sid = session.session_id
        self.sessions[sid] = session
        payload = result.to_json()
        self.results[sid].append(payload)
        self._append_event(
            {"event": "turn_appended", "session_id": sid, "role": "user", "text": user_text}
        )
        self._append_event(
            {
                "event": "turn_appended",
                "session_id": sid,
                "role": "system",
                "text": result.response_text,
            }
        )
        self._append_event({"event": "turn_result", "session_id": sid, "result": payload})

    def session_json(self, session_id: str) -> dict:
        session = self.get(session_id)
        return {
            "session_id": session.session_id,
            "created_at": session.created_at,
            "turns": [{"role": t.role.value, "text": t.text} for t in session.turns],
            "trace": list(self.results.get(session_id, [])),
        }


def create_app(engine: Engine, store: Optional[SessionStore] = None) -> FastAPI:
    app = FastAPI(title="dialog engine")
    store = store or SessionStore()
    app.state.engine = engine
    app.state.store = store

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/session")
    def create_session():
        return {"session_id": store.create().session_id}

    @app.get("/session/{session_id}")
    def get_session(session_id: str):
        return store.session_json(session_id)

    @app.post("/session/{session_id}/turn")
    def post_turn(session_id: str, body: TurnRequest):
        session = store.get(session_id)
        lock = store.lock_for(session_id)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="turn already in flight")
        try:
            new_session, result = run_turn(
                session,
                body.text,
                engine,
                override_source=body.override_source,
                override_query=body.override_query,
            )
            store.record_turn(new_session, body.text, result)
            return result.to_json()
        except ProviderUnavailable as exc:
            raise HTTPException(status_code=502, detail=str(exc))
        except (EngineError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        finally:
            lock.release()

    return app


def serve(config_path: str, host: str = "127.0.0.1", port: int = 8080) -> None:
    """Build the engine from config and run the service until interrupted."""
    import uvicorn

    config = EngineConfig.load(config_path)
    engine = Engine.from_config(config)
    store = SessionStore(config.session_log)
    uvicorn.run(create_app(engine, store), host=host, port=port)
