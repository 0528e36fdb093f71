"""HTTP refinement service.

The scheduler posts a task's attributes and original requirements; the
handler registered for the task kind returns a refined memory requirement.
Anything that goes wrong on the model side degrades to a passthrough answer
so scheduling never blocks.
"""
from __future__ import annotations

import json
import logging
import os
import signal
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ArtifactInvalid
from .predictor import RefinementDecision, load_envelope, passthrough

log = logging.getLogger(__name__)

ENV_PREFIX = "BUILDMEM_"
FSYNC_POLICIES = ("never", "always", "close")


class OriginalRequirements(BaseModel):
    memory_gb: float = Field(gt=0)
    cpu: float | None = None


class RefineRequest(BaseModel):
    model_config = ConfigDict(extra="ignore")

    task_id: str = Field(min_length=1)
    task_kind: str
    attributes: dict[str, str] = Field(default_factory=dict)
    original_requirements: OriginalRequirements

    @field_validator("attributes", mode="before")
    @classmethod
    def _stringify(cls, v):
        # schedulers sometimes send numbers; the map is string-valued
        if isinstance(v, dict):
            return {str(k): (val if isinstance(val, str) else json.dumps(val)) for k, val in v.items()}
        return v


class RefinedRequirements(BaseModel):
    memory_gb: float


class RefineResponse(BaseModel):
    task_id: str
    refined_requirements: RefinedRequirements
    decision: dict[str, Any]
    handler: str
    model_version: str
    latency_ms: float
    fallback: bool


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    deadline_ms: float = 100.0
    decision_log: str | None = "decisions.jsonl"
    fsync: str = "close"
    models: dict = field(default_factory=dict)  # task_kind -> envelope path
    workers: int = 4

    def __post_init__(self):
        if self.fsync not in FSYNC_POLICIES:
            raise ValueError(f"fsync must be one of {FSYNC_POLICIES}")
        if not self.deadline_ms > 0:
            raise ValueError("deadline_ms must be > 0")


def load_config(path=None, env=None, **overrides) -> ServiceConfig:
    """File, then ``BUILDMEM_*`` environment, then explicit overrides."""
    values: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        values.update(raw.get("serve", raw))
    env = os.environ if env is None else env
    casts = {"HOST": ("host", str), "PORT": ("port", int), "DEADLINE_MS": ("deadline_ms", float),
             "DECISION_LOG": ("decision_log", str), "FSYNC": ("fsync", str), "WORKERS": ("workers", int)}
    for key, (name, cast) in casts.items():
        if ENV_PREFIX + key in env:
            values[name] = cast(env[ENV_PREFIX + key])
    if ENV_PREFIX + "MODELS" in env:
        # cpp_build=/path/a.json,other=/path/b.json
        values["models"] = dict(p.split("=", 1) for p in env[ENV_PREFIX + "MODELS"].split(",") if p)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = ServiceConfig.__dataclass_fields__
    return ServiceConfig(**{k: v for k, v in values.items() if k in known})


@dataclass(frozen=True)
class Handler:
    task_kind: str
    model: Any
    loaded_at: str

    @property
    def model_version(self) -> str:
        return self.model.version

    def refine(self, request: RefineRequest) -> RefinementDecision:
        row = self.model.row_from_attributes(request.attributes)
        orig = request.original_requirements.memory_gb
        return self.model.refine_rows([row], [orig], [request.task_id])[0]


class HandlerRegistry:
    """task_kind -> Handler; replacement swaps the whole mapping atomically."""

    def __init__(self):
        self._lock = threading.Lock()
        self._handlers: dict[str, Handler] = {}

    def get(self, task_kind: str) -> Handler | None:
        return self._handlers.get(task_kind)

    def register(self, task_kind: str, source) -> Handler:
        model = source if hasattr(source, "refine_rows") else load_envelope(source)
        try:
            model.self_check()
        except ArtifactInvalid:
            raise
        except Exception as e:
            raise ArtifactInvalid(f"self-check failed: {type(e).__name__}: {e}") from e
        handler = Handler(task_kind, model, datetime.now(timezone.utc).isoformat())
        with self._lock:
            new = dict(self._handlers)
            new[task_kind] = handler
            self._handlers = new
        return handler

    def snapshot(self) -> list[Handler]:
        return sorted(self._handlers.values(), key=lambda h: h.task_kind)


class DecisionLog:
    def __init__(self, path=None, fsync: str = "close"):
        self.path = path
        self.fsync = fsync
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self._fh is None:
            return
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()
        if self.fsync == "always":
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is None:
            return
        self._fh.flush()
        if self.fsync != "never":
            os.fsync(self._fh.fileno())
        self._fh.close()
        self._fh = None


class RefinementService:
    def __init__(self, config: ServiceConfig | None = None):
        self.config = config or ServiceConfig(decision_log=None)
        self.registry = HandlerRegistry()
        self._executor = ThreadPoolExecutor(max_workers=self.config.workers, thread_name_prefix="refine")
        self._log = DecisionLog(self.config.decision_log, self.config.fsync)
        self._write_lock = threading.Lock()
        self.counters = {"refine_total": 0, "fallback_total": 0, "clip_total": 0}
        self._latencies: deque = deque(maxlen=10_000)
        for kind, path in self.config.models.items():
            self.registry.register(kind, path)

    def register_handler(self, task_kind: str, source) -> Handler:
        """Load and self-check a model; on failure the old handler keeps serving."""
        return self.registry.register(task_kind, source)

    def refine(self, request: RefineRequest | dict) -> RefineResponse:
        t0 = time.perf_counter()
        if not isinstance(request, RefineRequest):
            request = RefineRequest.model_validate(request)
        orig = request.original_requirements.memory_gb
        handler = self.registry.get(request.task_kind)
        reason = None
        decision = None
        if handler is None:
            reason = "unknown_task_kind"
        else:
            future = self._executor.submit(handler.refine, request)
            try:
                decision = future.result(timeout=self.config.deadline_ms / 1000.0)
                if not decision.final_gb <= orig:
                    reason, decision = "never_increase_violation", None
            except FutureTimeout:
                future.cancel()
                reason = "deadline"
            except Exception as e:  # model errors degrade to passthrough
                reason = f"handler_error:{type(e).__name__}"
        version = handler.model_version if handler else ""
        if decision is None:
            decision = passthrough(request.task_id, orig, version)
        latency = (time.perf_counter() - t0) * 1000.0
        response = RefineResponse(
            task_id=request.task_id,
            refined_requirements=RefinedRequirements(memory_gb=decision.final_gb),
            decision=decision.to_dict(),
            handler=handler.task_kind if handler else "passthrough",
            model_version=version,
            latency_ms=latency,
            fallback=decision.strategy == "passthrough",
        )
        with self._write_lock:
            self.counters["refine_total"] += 1
            self.counters["fallback_total"] += int(response.fallback)
            self.counters["clip_total"] += int(decision.clipped)
            self._latencies.append(latency)
            self._log.write({
                "request": request.model_dump(),
                "response": response.model_dump(),
                "fallback_reason": reason,
            })
        return response

    def health(self) -> dict:
        with self._write_lock:
            counters = dict(self.counters)
            lat = np.array(self._latencies) if self._latencies else None
        counters["latency_p50_ms"] = float(np.percentile(lat, 50)) if lat is not None else 0.0
        counters["latency_p95_ms"] = float(np.percentile(lat, 95)) if lat is not None else 0.0
        return {
            "status": "ok",
            "handlers": [
                {"task_kind": h.task_kind, "model_version": h.model_version, "loaded_at": h.loaded_at}
                for h in self.registry.snapshot()
            ],
            "counters": counters,
        }

    def close(self) -> None:
        self._executor.shutdown(wait=True)
        with self._write_lock:
            self._log.close()


def create_app(service: RefinementService) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app):
        yield
        service.close()

    app = FastAPI(title="buildmem refinement service", lifespan=lifespan)
    app.state.service = service

    async def _json_body(request: Request):
        try:
            body = json.loads(await request.body())
        except (ValueError, UnicodeDecodeError) as e:
            return None, JSONResponse({"error": f"invalid JSON: {e}"}, status_code=400)
        if not isinstance(body, dict):
            return None, JSONResponse({"error": "expected a JSON object"}, status_code=400)
        return body, None

    @app.post("/v1/refine")
    async def refine(request: Request):
        body, err = await _json_body(request)
        if err:
            return err
        try:
            req = RefineRequest.model_validate(body)
        except ValidationError as e:
            return JSONResponse({"error": "invalid request", "detail": json.loads(e.json())}, status_code=400)
        return JSONResponse(service.refine(req).model_dump())

    @app.put("/v1/handlers/{task_kind}")
    async def register(task_kind: str, request: Request):
        body, err = await _json_body(request)
        if err:
            return err
        source = body.get("envelope", body.get("path"))
        if source is None:
            return JSONResponse({"error": "body needs 'path' or 'envelope'"}, status_code=400)
        try:
            h = service.register_handler(task_kind, source)
        except ArtifactInvalid as e:
            return JSONResponse({"error": str(e), "task_kind": task_kind}, status_code=422)
        return {"status": "registered", "task_kind": task_kind, "model_version": h.model_version,
                "loaded_at": h.loaded_at}

    @app.get("/v1/health")
    async def health():
        return service.health()

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    service = RefinementService(config)
    log.info("serving %d handler(s) on %s:%d", len(config.models), config.host, config.port)
    # uvicorn re-raises the captured signal after a graceful shutdown; a no-op
    # handler turns SIGTERM into a normal return so the caller can finish up
    in_main = threading.current_thread() is threading.main_thread()
    prev = signal.signal(signal.SIGTERM, lambda *_: None) if in_main else None
    try:
        uvicorn.run(create_app(service), host=config.host, port=config.port, log_level="warning")
    finally:
        if in_main:
            signal.signal(signal.SIGTERM, prev)
