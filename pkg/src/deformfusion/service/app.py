"""FastAPI app: one reconstruction session per client stream.

Producers POST frames; the consumer side POSTs ``step`` to process the most
recent pending frame. Submitting faster than stepping drops stale frames
(latest-wins), exactly as the in-process feed does.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response

from .. import __version__
from ..geometry import CameraIntrinsics, DepthScan, normals_from_depth
from ..io import format_ply
from ..pipeline import (
    METRIC_COLUMNS,
    Reconstructor,
    RunConfig,
    difference_series,
    load_config,
    parse_metrics,
    rows_to_csv,
    summarize,
)
from ..posefeed import FeatureCorrespondence, FrameEnvelope, LatestFeed, OrderingError, PosePrior
from .schemas import (
    FrameAck,
    FramePayload,
    ReportRequest,
    ReportResponse,
    SessionCreate,
    SessionInfo,
    StepResult,
    decode_raster,
)


@dataclass
class Session:
    id: str
    config: RunConfig
    intrinsics: CameraIntrinsics
    reconstructor: Reconstructor
    feed: LatestFeed = field(default_factory=LatestFeed)
    metrics: list[dict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)  # serialises model mutation

    def info(self) -> SessionInfo:
        model = self.reconstructor.model
        return SessionInfo(
            id=self.id,
            frames_processed=self.reconstructor.frames_processed,
            submitted=self.feed.submitted,
            delivered=self.feed.delivered,
            dropped=self.feed.dropped,
            pending=self.feed.pending,
            points=0 if model is None else len(model),
        )


def _envelope(payload: FramePayload, session: Session) -> FrameEnvelope:
    intr = session.intrinsics
    depth = decode_raster(payload.depth, intr.shape)
    color = None if payload.color is None else decode_raster(payload.color, intr.shape + (3,), np.uint8)
    scan = DepthScan(depth, intr, color=color, normals=np.zeros(intr.shape + (3,)), frame_index=payload.frame_index)
    scan.normals = normals_from_depth(scan, session.config.normal_smoothing)
    prior = None
    if payload.prior is not None:
        prior = PosePrior(np.reshape(payload.prior.R, (3, 3)), payload.prior.T, payload.frame_index)
    corrs = [FeatureCorrespondence(c.previous, c.current, c.id) for c in payload.correspondences]
    return FrameEnvelope(scan, prior, corrs)


def _json_metrics(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, (np.integer,)):
            v = int(v)
        elif isinstance(v, (np.floating,)):
            v = float(v)
        if isinstance(v, float) and not np.isfinite(v):
            v = str(v)
        out[k] = v
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="deformfusion", version=__version__)
    sessions: dict[str, Session] = {}
    app.state.sessions = sessions

    def get(session_id: str) -> Session:
        try:
            return sessions[session_id]
        except KeyError:
            raise HTTPException(404, f"unknown session {session_id}") from None

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__, "sessions": len(sessions)}

    @app.post("/sessions", status_code=201)
    def create_session(req: SessionCreate) -> SessionInfo:
        try:
            intr = CameraIntrinsics(**req.intrinsics.model_dump())
            cfg = load_config(overrides=req.config)
        except (ValueError, TypeError) as exc:
            raise HTTPException(422, str(exc)) from None
        if cfg.scene is not None or cfg.input_dir is not None:
            raise HTTPException(422, "sessions take frames over HTTP; scene.* and input_dir are not accepted")
        sid = uuid.uuid4().hex
        sessions[sid] = Session(sid, cfg, intr, Reconstructor(cfg))
        return sessions[sid].info()

    @app.get("/sessions/{session_id}")
    def session_info(session_id: str) -> SessionInfo:
        return get(session_id).info()

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str) -> Response:
        get(session_id)
        del sessions[session_id]
        return Response(status_code=204)

    @app.post("/sessions/{session_id}/frames", status_code=202)
    def submit_frame(session_id: str, payload: FramePayload) -> FrameAck:
        session = get(session_id)
        try:
            env = _envelope(payload, session)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        try:
            ack = session.feed.submit(env)
        except OrderingError as exc:
            raise HTTPException(409, str(exc)) from None
        return FrameAck(frame_index=ack.frame_index, arrival=ack.arrival, superseded=ack.superseded)

    @app.post("/sessions/{session_id}/step")
    def step(session_id: str) -> StepResult:
        session = get(session_id)
        with session.lock:
            env = session.feed.take_latest()
            if env is None:
                return StepResult(processed=False)
            try:
                res = session.reconstructor.process(env)
            except ValueError as exc:
                raise HTTPException(422, f"frame {env.frame_index}: {exc}") from None
            res.metrics["dropped"] = session.feed.dropped
            session.metrics.append(res.metrics)
        return StepResult(
            processed=True, frame=res.frame, skipped=res.skipped, stages=res.stages, metrics=_json_metrics(res.metrics)
        )

    @app.get("/sessions/{session_id}/metrics")
    def metrics(session_id: str) -> Response:
        session = get(session_id)
        return Response(rows_to_csv(session.metrics, METRIC_COLUMNS), media_type="text/csv")

    @app.get("/sessions/{session_id}/model.ply")
    def model(session_id: str) -> Response:
        session = get(session_id)
        if session.reconstructor.model is None:
            raise HTTPException(404, "no frame processed yet")
        with session.lock:
            text = format_ply(session.reconstructor.model)
        return Response(text, media_type="text/plain")

    @app.post("/report")
    def report(req: ReportRequest) -> ReportResponse:
        try:
            rows = parse_metrics(req.metrics)
            summary = summarize(rows)
            diff = difference_series(rows, parse_metrics(req.baseline, "baseline")) if req.baseline else None
        except (ValueError, KeyError) as exc:
            raise HTTPException(422, str(exc)) from None
        return ReportResponse(frames=len(rows), summary=summary, difference=diff)

    return app
