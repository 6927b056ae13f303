"""HTTP front end: a reference ``/segment`` backend plus decision and metric endpoints.

Run with ``fas serve``. The ``/segment`` route fills the convex hull of the
foreground points, so it speaks the same wire format a hosted promptable
segmenter would and can stand in for one in tests.
"""

from __future__ import annotations

import base64
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .annotator import map_from_bytes
from .core import FASError, LandmarkSet
from .decision import DecisionConfig, decide
from .evalkit import ScoredSample, acer, apcer, apcer_by_type, bpcer
from .segmenter import MockSegmenter, PointPrompt, SegmentationResult, _dilate, decode_png_b64, segment_response


class Point(BaseModel):
    x: int
    y: int
    label: int = Field(ge=0, le=1)


class SegmentRequest(BaseModel):
    image_png_b64: str
    points: list[Point]
    multimask: bool = True


class MaskRLE(BaseModel):
    rle_counts: list[int]
    height: int
    width: int


class SegmentResponse(BaseModel):
    masks: list[MaskRLE]
    scores: list[float]


class DecideRequest(BaseModel):
    pred_fga1_b64: str
    landmarks: dict
    epsilon: float = 0.0
    key_regions: Optional[list[str]] = None


class DecideResponse(BaseModel):
    f_attack: float
    f_real: float
    score: float
    verdict: int


class ScoredItem(BaseModel):
    score: float
    truth_label: str
    attack_type: Optional[str] = None


class MetricsRequest(BaseModel):
    samples: list[ScoredItem]
    threshold: float


class MetricsResponse(BaseModel):
    apcer: float
    bpcer: float
    acer: float
    apcer_by_type: dict[str, float]


def create_app(dilation: int = 2) -> FastAPI:
    app = FastAPI(title="fgfas", version=__version__)
    mock = MockSegmenter()

    @app.exception_handler(FASError)
    async def fas_error(request: Request, exc: FASError):
        return JSONResponse(status_code=422, content={"detail": str(exc), "error": type(exc).__name__})

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/segment", response_model=SegmentResponse)
    def segment(req: SegmentRequest):
        image = decode_png_b64(req.image_png_b64)
        prompt = PointPrompt([(p.x, p.y, p.label) for p in req.points], "request")
        result = mock.segment(image, prompt)
        if req.multimask and dilation > 0:
            result = SegmentationResult(result.masks + [_dilate(result.masks[0], dilation)], [1.0, 0.5])
        return segment_response(result)

    @app.post("/decide", response_model=DecideResponse)
    def decide_route(req: DecideRequest):
        try:
            raw = base64.b64decode(req.pred_fga1_b64, validate=True)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=f"bad base64 payload: {exc}")
        pred = map_from_bytes(raw)
        landmarks = LandmarkSet.from_json(req.landmarks)
        cfg = DecisionConfig(epsilon=req.epsilon)
        if req.key_regions is not None:
            cfg = DecisionConfig(epsilon=req.epsilon, key_regions=tuple(req.key_regions))
        return decide(pred, landmarks, cfg)

    @app.post("/metrics", response_model=MetricsResponse)
    def metrics(req: MetricsRequest):
        samples = [ScoredSample(s.score, s.truth_label, s.attack_type) for s in req.samples]
        t = req.threshold
        return {
            "apcer": apcer(samples, t),
            "bpcer": bpcer(samples, t),
            "acer": acer(samples, t),
            "apcer_by_type": apcer_by_type(samples, t),
        }

    return app


app = create_app()

