"""HTTP API: scoring, heatmaps, background analyses, personas.

Every non-2xx response body has the shape
{"status": int, "code": str, "message": str, "request_id": str}.
"""
from __future__ import annotations

import base64
import json
import os
import uuid
from contextlib import asynccontextmanager
from typing import Any, Optional

from fastapi import FastAPI, HTTPException, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .domain import AdValidationError
from .imaging import png_bytes
from .jobs import DuplicateActiveJob, JobExecutor, UnknownJob
from .llm.pipeline import (
    DEFAULT_FEW_SHOT_PROMPTS,
    AnalysisFailed,
    generate_image_prompt,
    generate_persona_image,
    generate_user_persona,
    resolve_clock,
)
from .llm.backends import MockImageBackend
from .llm.templates import builtin_templates
from .service import ModelService, analysis_runner, make_backend, record_from_payload
from .store import FileStore, UnknownAd
from .ingestion import record_to_json_dict


class ApiFault(Exception):
    """Domain error with an HTTP status and machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


class ScoreRequest(BaseModel):
    model: Optional[str] = None
    ad_id: Optional[str] = None
    ad: Optional[dict] = None


class AnalysisRequest(BaseModel):
    kind: str
    params: dict = Field(default_factory=dict)


class PersonaRequest(BaseModel):
    interests: list[str]
    backend: str = "mock"


def _error_body(status: int, code: str, message: str, request_id: str) -> dict:
    return {"status": status, "code": code, "message": message, "request_id": request_id}


def create_app(
    store_root: str,
    default_model: str | None = None,
    job_workers: int = 4,
    frontend_dir: str | None = None,
) -> FastAPI:
    store = FileStore(store_root)
    executor = JobExecutor(store, analysis_runner, workers=job_workers)
    services: dict[str, ModelService] = {}

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        executor.start()
        yield
        executor.stop()

    app = FastAPI(title="soda", lifespan=lifespan)
    app.state.store = store
    app.state.executor = executor

    def service_for(name: str | None) -> ModelService:
        model_name = name or default_model
        if not model_name:
            models = store.list_models()
            if len(models) == 1:
                model_name = models[0]
            else:
                raise ApiFault(422, "MODEL_REQUIRED", "no model specified and no unique default")
        if model_name not in services:
            path = store.model_path(model_name)
            if not os.path.isdir(path):
                raise ApiFault(404, "UNKNOWN_MODEL", f"model {model_name!r} not found")
            services[model_name] = ModelService.open(path, store=store)
        return services[model_name]

    # -- error handlers ------------------------------------------------------

    @app.exception_handler(ApiFault)
    async def handle_fault(request: Request, exc: ApiFault):
        return JSONResponse(
            status_code=exc.status,
            content=_error_body(exc.status, exc.code, exc.message, request.state.request_id),
        )

    @app.exception_handler(HTTPException)
    async def handle_http(request: Request, exc: HTTPException):
        code = getattr(exc, "error_code", "HTTP_ERROR")
        return JSONResponse(
            status_code=exc.status_code,
            content=_error_body(exc.status_code, code, str(exc.detail), request.state.request_id),
        )

    @app.exception_handler(RequestValidationError)
    async def handle_validation(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content=_error_body(422, "VALIDATION_FAILED", str(exc.errors()), request.state.request_id),
        )

    @app.exception_handler(Exception)
    async def handle_crash(request: Request, exc: Exception):
        return JSONResponse(
            status_code=500,
            content=_error_body(
                500, "INTERNAL", f"{type(exc).__name__}: {exc}", request.state.request_id
            ),
        )

    @app.middleware("http")
    async def stamp_request_id(request: Request, call_next):
        request.state.request_id = uuid.uuid4().hex[:12]
        return await call_next(request)

    # -- ads -------------------------------------------------------------------

    def _persist_ad(payload: dict) -> dict:
        """Store an inline ad; data-URI frames become content-addressed images."""
        frames = payload.get("frames") or []
        stored = []
        for ref in frames:
            if isinstance(ref, str) and ref.startswith("data:"):
                try:
                    _, b64 = ref.split(",", 1)
                    stored.append(store.put_image(base64.b64decode(b64)))
                except Exception as exc:
                    raise ApiFault(422, "VALIDATION_FAILED", f"bad frame data URI: {exc}")
            else:
                if not store.has_image(str(ref)):
                    raise ApiFault(422, "VALIDATION_FAILED", f"unknown stored image {ref!r}")
                stored.append(str(ref))
        payload = dict(payload, frames=stored)
        try:
            record = record_from_payload(payload)
            store.put_ad(record)
        except AdValidationError as exc:
            raise ApiFault(422, "VALIDATION_FAILED", str(exc))
        except (ValueError, TypeError) as exc:
            raise ApiFault(422, "VALIDATION_FAILED", f"malformed ad payload: {exc}")
        return record_to_json_dict(record)

    @app.post("/api/ads", status_code=201)
    def post_ad(payload: dict):
        return _persist_ad(payload)

    @app.get("/api/ads/{ad_id}")
    def get_ad(ad_id: str):
        try:
            return record_to_json_dict(store.get_ad(ad_id))
        except UnknownAd:
            raise ApiFault(404, "UNKNOWN_AD", f"no stored ad {ad_id!r}")

    # -- scoring -----------------------------------------------------------------

    @app.post("/api/score")
    def score(body: ScoreRequest, persist: bool = Query(default=False)):
        svc = service_for(body.model)
        heatmap_url = None
        if body.ad_id is not None:
            try:
                record = store.get_ad(body.ad_id)
            except UnknownAd:
                raise ApiFault(404, "UNKNOWN_AD", f"no stored ad {body.ad_id!r}")
            heatmap_url = f"/api/ads/{record.ad_id}/heatmap?model={svc.model.model_id}"
        elif body.ad is not None:
            if persist:
                stored = _persist_ad(body.ad)
                record = store.get_ad(stored["ad_id"])
                heatmap_url = f"/api/ads/{record.ad_id}/heatmap?model={svc.model.model_id}"
            else:
                try:
                    record = record_from_payload(dict(body.ad))
                except (ValueError, TypeError) as exc:
                    raise ApiFault(422, "VALIDATION_FAILED", f"malformed ad payload: {exc}")
                # not persisted: no addressable heatmap resource
        else:
            raise ApiFault(422, "VALIDATION_FAILED", "provide ad_id or an inline ad")

        try:
            svc.validate(record)
            result = svc.score(record)
        except AdValidationError as exc:
            raise ApiFault(422, "VALIDATION_FAILED", str(exc))
        except (ValueError, FileNotFoundError) as exc:
            raise ApiFault(422, "VALIDATION_FAILED", str(exc))
        result["heatmap_url"] = heatmap_url
        return result

    # -- heatmaps ------------------------------------------------------------------

    @app.get("/api/ads/{ad_id}/heatmap")
    def heatmap(
        ad_id: str,
        model: str | None = None,
        alpha: float = 0.5,
        frame: int = 0,
        format: str = "png",
    ):
        if not 0.0 <= alpha <= 1.0:
            raise ApiFault(422, "VALIDATION_FAILED", f"alpha must be in [0, 1], got {alpha}")
        svc = service_for(model)
        try:
            record = store.get_ad(ad_id)
        except UnknownAd:
            raise ApiFault(404, "UNKNOWN_AD", f"no stored ad {ad_id!r}")
        if not record.creative.frames:
            raise ApiFault(422, "NO_FRAMES", f"ad {ad_id!r} has no image frames")
        try:
            overlay, saliency, _ = svc.heatmap(record, frame=frame, alpha=alpha)
        except IndexError as exc:
            raise ApiFault(422, "FRAME_OUT_OF_RANGE", str(exc))
        if format == "json":
            return {
                "grid": saliency.grid.tolist(),
                "alpha": alpha,
                "colormap": overlay.colormap,
                "model_id": svc.model.model_id,
                "ad_id": ad_id,
                "frame": frame,
                "image": f"/api/images/{record.creative.frames[frame]}",
            }
        return Response(content=png_bytes(overlay.image), media_type="image/png")

    @app.get("/api/images/{name}")
    def get_image(name: str):
        path = store.image_path(name)
        if not os.path.isfile(path) or "/" in name or ".." in name:
            raise ApiFault(404, "UNKNOWN_IMAGE", f"no stored image {name!r}")
        with open(path, "rb") as fh:
            return Response(content=fh.read(), media_type="image/png")

    # -- analyses -----------------------------------------------------------------

    @app.post("/api/analyses", status_code=202)
    def submit_analysis(body: AnalysisRequest):
        brands = body.params.get("brands")
        if brands:
            for brand in brands:
                if not store.ads_for_brand(brand):
                    raise ApiFault(404, "UNKNOWN_BRAND", f"no stored ads for brand {brand!r}")
        brand = body.params.get("brand")
        if brand and not store.ads_for_brand(brand):
            raise ApiFault(404, "UNKNOWN_BRAND", f"no stored ads for brand {brand!r}")
        try:
            job = app.state.executor.submit(body.kind, body.params)
        except DuplicateActiveJob as exc:
            raise ApiFault(409, "DUPLICATE_JOB", str(exc))
        except ValueError as exc:
            raise ApiFault(422, "VALIDATION_FAILED", str(exc))
        return {"job_id": job.job_id, "state": job.state}

    @app.get("/api/analyses/{job_id}")
    def get_analysis(job_id: str):
        try:
            job = app.state.executor.get(job_id)
        except UnknownJob:
            raise ApiFault(404, "UNKNOWN_JOB", f"no job {job_id!r}")
        body = job.to_dict()
        if job.state == "done" and job.result_path:
            result_file = os.path.join(store.root, job.result_path)
            if result_file.endswith(".json") and os.path.exists(result_file):
                with open(result_file, "r", encoding="utf-8") as fh:
                    body["result"] = json.load(fh)
        return body

    # -- personas ------------------------------------------------------------------

    @app.post("/api/personas", status_code=201)
    def post_persona(body: PersonaRequest):
        if not body.interests:
            raise ApiFault(422, "VALIDATION_FAILED", "interests must be non-empty")
        templates = builtin_templates()
        try:
            backend = make_backend(body.backend, store)
        except ValueError as exc:
            raise ApiFault(422, "VALIDATION_FAILED", str(exc))
        clock = resolve_clock(backend)
        try:
            persona = generate_user_persona(
                body.interests, backend, templates["user-persona-generation"], clock=clock
            )
            spec = generate_image_prompt(
                persona, list(DEFAULT_FEW_SHOT_PROMPTS), backend, templates["image-prompt-generation"]
            )
            image_ref = generate_persona_image(spec, MockImageBackend(), store.images_dir)
        except AnalysisFailed as exc:
            raise ApiFault(502, "ANALYSIS_FAILED", str(exc))
        persona = persona.model_copy(update={"image_prompt": spec, "image_ref": image_ref})
        body_out = persona.model_dump()
        body_out["image_url"] = f"/api/images/{image_ref}"
        return body_out

    @app.get("/api/health")
    def health():
        return {"status": "ok", "models": store.list_models(), "n_ads": len(store.list_ads())}

    if frontend_dir and os.path.isdir(frontend_dir):
        app.mount("/ui", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app
