"""HTTP service: job-queue colorization API consumed by the studio UI."""

from __future__ import annotations

import base64
import io
import queue
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image

from .data import PALETTE, SHAPES
from .diffusion import SamplerConfig, make_schedule
from .masks import CorruptMaskError, rle_decode
from .sampling import ColorizeRequest, colorize

JOB_STATES = ("queued", "running", "done", "failed")
_STATE_ORDER = {s: i for i, s in enumerate(JOB_STATES)}


class ApiValidationError(ValueError):
    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(message)


@dataclass
class Job:
    id: str
    state: str = "queued"
    request_echo: dict = field(default_factory=dict)
    created_at: float = field(default_factory=time.time)
    started_at: float | None = None
    finished_at: float | None = None
    result_png_b64: str | None = None
    provenance: dict | None = None
    error: str | None = None

    def as_dict(self, include_result: bool = True) -> dict:
        out = {"id": self.id, "state": self.state, "request": self.request_echo,
               "created_at": self.created_at, "started_at": self.started_at,
               "finished_at": self.finished_at, "error": self.error}
        if self.state == "done" and include_result:
            out["result_png_base64"] = self.result_png_b64
            out["provenance"] = self.provenance
        return out


class JobStore:
    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def create(self, request_echo: dict) -> Job:
        job = Job(id=uuid.uuid4().hex, request_echo=request_echo)
        with self._lock:
            self._jobs[job.id] = job
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def transition(self, job_id: str, state: str, **updates) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if _STATE_ORDER[state] < _STATE_ORDER[job.state]:
                raise RuntimeError(f"illegal transition {job.state} -> {state}")
            job.state = state
            for key, value in updates.items():
                setattr(job, key, value)


def _decode_gray_png(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except Exception as exc:
        raise ApiValidationError("gray_png_base64", f"invalid base64: {exc}") from exc
    try:
        with Image.open(io.BytesIO(raw)) as img:
            gray = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise ApiValidationError("gray_png_base64", f"not a decodable PNG: {exc}") from exc
    return gray


def _require(payload: dict, key: str, kind, path: str | None = None, default=...):
    path = path or key
    if key not in payload:
        if default is not ...:
            return default
        raise ApiValidationError(path, "missing required field")
    value = payload[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind):
        raise ApiValidationError(path, f"expected {kind.__name__}")
    return value


def parse_colorize_payload(payload: dict) -> ColorizeRequest:
    """Validate the wire payload; errors carry exact field paths."""
    if not isinstance(payload, dict):
        raise ApiValidationError("", "body must be a JSON object")
    gray = _decode_gray_png(_require(payload, "gray_png_base64", str))
    h, w = gray.shape
    global_text = _require(payload, "global_text", str, default="")
    raw_instances = _require(payload, "instances", list, default=[])
    instances = []
    for i, inst in enumerate(raw_instances):
        base = f"instances[{i}]"
        if not isinstance(inst, dict):
            raise ApiValidationError(base, "expected an object")
        text = _require(inst, "text", str, f"{base}.text", default="")
        mask_obj = _require(inst, "mask", dict, f"{base}.mask")
        mh = _require(mask_obj, "h", int, f"{base}.mask.h")
        mw = _require(mask_obj, "w", int, f"{base}.mask.w")
        runs = _require(mask_obj, "runs", list, f"{base}.mask.runs")
        if (mh, mw) != (h, w):
            raise ApiValidationError(f"{base}.mask",
                                     f"mask {mh}x{mw} does not match image {h}x{w}")
        try:
            mask = rle_decode(runs, mh, mw)
        except CorruptMaskError as exc:
            raise ApiValidationError(f"{base}.mask.runs", str(exc)) from exc
        if mask.is_empty():
            raise ApiValidationError(f"{base}.mask.runs", "mask has no set pixels")
        instances.append((mask, text))
    sampler = SamplerConfig(
        steps=_require(payload, "steps", int, default=SamplerConfig.steps),
        guidance=_require(payload, "guidance", float, default=SamplerConfig.guidance),
        alpha=_require(payload, "alpha", float, default=SamplerConfig.alpha),
        beta=_require(payload, "beta", float, default=SamplerConfig.beta),
        seed=_require(payload, "seed", int, default=0),
        luma_lock=_require(payload, "luma_lock", bool, default=False),
    )
    try:
        return ColorizeRequest(gray=gray, global_text=global_text,
                               instances=instances, sampler=sampler)
    except ValueError as exc:
        raise ApiValidationError("instances", str(exc)) from exc


def _encode_png(rgb8: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(rgb8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def create_app(model, schedule=None, checkpoint_hash: str = "unset",
               worker_count: int = 1, queue_size: int = 8,
               static_dir=None) -> FastAPI:
    schedule = schedule or make_schedule()
    store = JobStore()
    work: queue.Queue = queue.Queue(maxsize=queue_size)
    stop = threading.Event()

    def worker_loop():
        while not stop.is_set():
            try:
                job_id, request = work.get(timeout=0.1)
            except queue.Empty:
                continue
            store.transition(job_id, "running", started_at=time.time())
            try:
                result = colorize(request, model, schedule)
                store.transition(job_id, "done", finished_at=time.time(),
                                 result_png_b64=_encode_png(result.rgb),
                                 provenance=result.provenance)
            except Exception as exc:
                store.transition(job_id, "failed", finished_at=time.time(),
                                 error=f"{type(exc).__name__}: {exc}")
            finally:
                work.task_done()

    @asynccontextmanager
    async def lifespan(_app):
        threads = [threading.Thread(target=worker_loop, daemon=True,
                                    name=f"sampler-{i}")
                   for i in range(worker_count)]
        for t in threads:
            t.start()
        yield
        stop.set()
        for t in threads:
            t.join(timeout=2)

    app = FastAPI(lifespan=lifespan)

    @app.exception_handler(ApiValidationError)
    async def _validation_handler(_request: Request, exc: ApiValidationError):
        return JSONResponse(status_code=400,
                            content={"error": {"field": exc.field_path,
                                               "message": str(exc)}})

    @app.get("/api/health")
    def health():
        return {"status": "ok", "checkpoint_hash": checkpoint_hash}

    @app.get("/api/palette")
    def palette():
        return {"colors": {name: list(rgb) for name, rgb in PALETTE.items()},
                "shapes": list(SHAPES)}

    @app.post("/api/colorize")
    async def submit(request: Request):
        try:
            payload = await request.json()
        except Exception:
            raise ApiValidationError("", "body is not valid JSON")
        parsed = parse_colorize_payload(payload)
        echo = {k: payload.get(k) for k in
                ("global_text", "alpha", "beta", "steps", "guidance", "seed",
                 "luma_lock")}
        echo["n_instances"] = parsed.n
        job = store.create(echo)
        try:
            work.put_nowait((job.id, parsed))
        except queue.Full:
            store.transition(job.id, "failed", error="queue full")
            return JSONResponse(status_code=409,
                                content={"error": {"message": "job queue is full"}})
        return {"job_id": job.id}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        job = store.get(job_id)
        if job is None:
            return JSONResponse(status_code=404,
                                content={"error": {"message": f"unknown job {job_id}"}})
        return job.as_dict()

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="studio")
    return app
