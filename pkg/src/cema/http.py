"""HTTP facade for the explanation engine.

Endpoints:
  GET  /scenarios                    list available scenarios
  GET  /scenarios/{sid}              scenario document (lanes, agents, goals)
  GET  /scenarios/{sid}/trace?seed=  factual trace as JSON-lines text
  GET  /schema/query                 JSON schema of the query template
  POST /sessions                     open a conversation {scenario, seed?}
  POST /sessions/{id}/query          body = query JSON or {"follow_up": ...}
  GET  /sessions/{id}/history
  GET  /sessions/{id}/jobs/{job}     poll an async query job
Sessions are in-memory (optionally mirrored to --state-dir as JSON).
"""

from __future__ import annotations

import json
import threading
import uuid
from importlib import resources
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from .causal import DegenerateDatasetError
from .engine import Engine
from .explain import (
    ConversationState,
    RealisationError,
    default_mode,
    realise,
)
from .query import QueryError, UnmatchedQueryError, parse_query
from .simulator import run as run_scenario
from .world import ScenarioError, load_scenario

QUERY_SCHEMA = {
    "title": "query",
    "type": "object",
    "properties": {
        "type": {"type": "string", "enum": ["why", "whatif", "what"],
                 "description": "Type of the question."},
        "vid": {"type": "integer", "description": "Vehicle the actions refer to."},
        "tense": {"type": "string", "enum": ["past", "present", "future"],
                  "description": "Grammatical tense of the question."},
        "actions": {"type": "array", "items": {"type": "string"},
                    "description": "Queried maneuver/macro action names."},
        "query_time": {"type": "integer", "description": "Timestep of asking."},
        "action_time": {"type": "integer",
                        "description": "Action start (what queries only)."},
        "negated": {"type": "boolean", "default": False},
        "factuals": {"type": "array", "items": {"type": "string"},
                     "description": "Factual actions when querying counterfactuals."},
    },
    "required": ["type", "vid", "query_time"],
}


class Session:
    def __init__(self, sid: str, engine: Engine):
        self.id = sid
        self.engine = engine
        self.conversation = ConversationState()
        self.history: list[dict] = []
        self.lock = threading.Lock()
        self.jobs: dict[str, dict] = {}


def build_app(scenario_dir: str | None = None, state_dir: str | None = None,
              frontend_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="cema", version="0.1.0")

    scenarios: dict[str, object] = {}
    if scenario_dir:
        for path in sorted(Path(scenario_dir).glob("*.json")):
            doc = path.read_text()
            sc = load_scenario(doc)
            scenarios[sc.name] = sc
    else:
        for name in ("s1", "s1_extended", "straight"):
            try:
                text = resources.files("cema.scenarios").joinpath(f"{name}.json").read_text()
            except FileNotFoundError:
                continue
            sc = load_scenario(text)
            scenarios[sc.name] = sc

    engines: dict[tuple[str, int], Engine] = {}
    sessions: dict[str, Session] = {}
    state_path = Path(state_dir) if state_dir else None
    if state_path:
        state_path.mkdir(parents=True, exist_ok=True)

    def engine_for(sid: str, seed: int) -> Engine:
        key = (sid, seed)
        if key not in engines:
            engines[key] = Engine(scenarios[sid], seed=seed)
        return engines[key]

    def persist(session: Session) -> None:
        if state_path is None:
            return
        (state_path / f"{session.id}.json").write_text(
            json.dumps(session.history, sort_keys=True))

    @app.get("/scenarios")
    def list_scenarios():
        return [{"id": name, "name": name,
                 "description": sc.description,
                 "max_steps": int(sc.document.get("max_steps", 280)),
                 "agents": [{"id": a.id, "ego": a.ego} for a in sc.agents]}
                for name, sc in sorted(scenarios.items())]

    @app.get("/scenarios/{sid}")
    def get_scenario(sid: str):
        if sid not in scenarios:
            raise HTTPException(404, f"unknown scenario {sid!r}")
        return scenarios[sid].document

    @app.get("/scenarios/{sid}/trace", response_class=PlainTextResponse)
    def get_trace(sid: str, seed: int = 21, steps: int | None = None):
        if sid not in scenarios:
            raise HTTPException(404, f"unknown scenario {sid!r}")
        engine = engine_for(sid, seed)
        trace = engine.factual if steps is None else run_scenario(
            scenarios[sid], steps, seed)
        return "\n".join(json.dumps(rec, sort_keys=True)
                         for rec in trace.jsonl_records())

    @app.get("/schema/query")
    def query_schema():
        return QUERY_SCHEMA

    @app.post("/sessions", status_code=201)
    def open_session(body: dict):
        sid = body.get("scenario")
        if sid not in scenarios:
            raise HTTPException(422, f"unknown scenario {sid!r}")
        seed = int(body.get("seed", 21))
        session = Session(str(uuid.uuid4()), engine_for(sid, seed))
        sessions[session.id] = session
        return {"session": session.id, "scenario": sid, "seed": seed}

    def _session(sid: str) -> Session:
        if sid not in sessions:
            raise HTTPException(404, f"unknown session {sid!r}")
        return sessions[sid]

    def _answer(session: Session, body: dict) -> dict:
        engine = session.engine
        if "follow_up" in body:
            kind = body["follow_up"]
            if kind not in ("why", "more"):
                raise HTTPException(422, f"unknown follow_up {kind!r}")
            try:
                exp = session.conversation.follow_up(kind)
            except RealisationError as e:
                raise HTTPException(422, str(e)) from None
            entry = {"request": body, "explanation": exp.as_dict()}
            session.history.append(entry)
            persist(session)
            return entry
        try:
            q = parse_query(body)
        except QueryError as e:
            raise HTTPException(422, str(e)) from None
        try:
            report = engine.answer(q, K=body.get("K"), alpha=body.get("alpha"),
                                   seed=body.get("seed"))
        except UnmatchedQueryError as e:
            raise HTTPException(422, f"unmatched query: {e}") from None
        except DegenerateDatasetError as e:
            raise HTTPException(422, f"degenerate dataset: {e}") from None
        session.conversation.record(q, report)
        mode = body.get("mode") or default_mode(q)
        try:
            exp = realise(report, q, mode).as_dict()
        except RealisationError as e:
            exp = {"text": None, "mode": mode, "causes": [], "error": str(e)}
        entry = {"request": q.as_dict(), "explanation": exp,
                 "report": report.as_dict()}
        session.history.append(entry)
        persist(session)
        return entry

    @app.post("/sessions/{sid}/query")
    def post_query(sid: str, body: dict, wait: bool = True):
        session = _session(sid)
        if wait:
            with session.lock:
                return _answer(session, body)
        job_id = str(uuid.uuid4())
        session.jobs[job_id] = {"status": "running", "result": None}

        def work():
            try:
                with session.lock:
                    result = _answer(session, body)
                session.jobs[job_id] = {"status": "done", "result": result}
            except HTTPException as e:
                session.jobs[job_id] = {"status": "error",
                                        "result": {"detail": e.detail}}
            except Exception as e:  # surface anything else to the poller
                session.jobs[job_id] = {"status": "error",
                                        "result": {"detail": str(e)}}

        threading.Thread(target=work, daemon=True).start()
        return {"job": job_id}

    @app.get("/sessions/{sid}/jobs/{job}")
    def poll_job(sid: str, job: str):
        session = _session(sid)
        if job not in session.jobs:
            raise HTTPException(404, f"unknown job {job!r}")
        return session.jobs[job]

    @app.get("/sessions/{sid}/history")
    def get_history(sid: str):
        return _session(sid).history

    if frontend_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="frontend")

    return app
