"""Landmark point prompts and promptable-segmentation backends.

Two backends are provided: :class:`MockSegmenter`, a deterministic convex-hull
fill of the prompt's foreground points, and :class:`ServiceSegmenter`, an HTTP
client for a hosted promptable segmenter speaking the ``POST /segment``
protocol (run-length encoded masks).
"""

from __future__ import annotations

import base64
import io
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx
import numpy as np
from PIL import Image

from .core import (
    FASError,
    IntegrityError,
    LandmarkSet,
    RegionMask,
    ValidationError,
    convex_hull,
    fill_convex_polygon,
)

log = logging.getLogger(__name__)

FOREGROUND = 1
BACKGROUND_HINT = 0
SEGMENTER_URL_ENV = "FAS_SEGMENTER_URL"


class SegmenterTransportError(FASError):
    """Timeout or protocol violation while talking to the segmenter; retryable."""

    retryable = True


@dataclass
class PointPrompt:
    points: list[tuple[float, float, int]]
    target_region: str

    def __post_init__(self) -> None:
        if not any(p[2] == FOREGROUND for p in self.points):
            raise ValidationError(f"prompt for {self.target_region!r} has no foreground point")

    @property
    def foreground(self) -> np.ndarray:
        return np.array([(x, y) for x, y, lab in self.points if lab == FOREGROUND], dtype=np.float64)

    def check_bounds(self, height: int, width: int) -> None:
        for x, y, _ in self.points:
            if not (0 <= x < width and 0 <= y < height):
                raise ValidationError(f"prompt point ({x}, {y}) outside the {height}x{width} image")


@dataclass
class SegmentationResult:
    masks: list[np.ndarray]
    scores: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.masks:
            raise IntegrityError("segmentation returned no mask")
        if len(self.scores) != len(self.masks):
            raise IntegrityError("mask / score count mismatch")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise IntegrityError("scores must lie in [0, 1]")


class SegmenterBackend(Protocol):
    def segment(self, image: np.ndarray, prompt: PointPrompt) -> SegmentationResult: ...


def build_point_prompts(landmarks: LandmarkSet, regions: Sequence[str]) -> list[PointPrompt]:
    """One prompt per region: its own landmarks as foreground, the landmarks
    of every other face region as background hints."""
    for r in regions:
        if r not in landmarks.region_index:
            raise ValidationError(f"unknown region {r!r}")
    prompts = []
    for r in regions:
        own = set(landmarks.region_index[r])
        others = sorted({i for name, idx in landmarks.region_index.items() if name != r for i in idx} - own)
        pts = [(float(x), float(y), FOREGROUND) for x, y in landmarks.points[sorted(own)]]
        pts += [(float(x), float(y), BACKGROUND_HINT) for x, y in landmarks.points[others]]
        prompts.append(PointPrompt(pts, r))
    return prompts


def polygon_prompt(polygon: Sequence[Sequence[float]], name: str = "pai") -> PointPrompt:
    return PointPrompt([(float(x), float(y), FOREGROUND) for x, y in polygon], name)


class MockSegmenter:
    """Fills the convex hull of the foreground points, optionally dilated."""

    def __init__(self, dilation: int = 0):
        self.dilation = int(dilation)

    def segment(self, image: np.ndarray, prompt: PointPrompt) -> SegmentationResult:
        h, w = image.shape[:2]
        prompt.check_bounds(h, w)
        hull = convex_hull(prompt.foreground)
        if len(hull) < 3:
            mask = np.zeros((h, w), dtype=bool)
            for x, y in np.rint(prompt.foreground).astype(int):
                mask[y, x] = True
        else:
            mask = fill_convex_polygon(hull, (h, w))
        if self.dilation > 0:
            mask = _dilate(mask, self.dilation)
        return SegmentationResult([mask], [1.0])


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    h, w = mask.shape
    padded = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                out |= padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
    return out


# --------------------------------------------------------------------------- #
# Wire format
# --------------------------------------------------------------------------- #


def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating run lengths of 0s and 1s, row-major, zeros first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    if height <= 0 or width <= 0:
        raise IntegrityError(f"invalid mask dimensions {height}x{width}")
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any():
        raise IntegrityError("negative run length")
    if counts.sum() != height * width:
        raise IntegrityError(f"run lengths sum to {counts.sum()}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def encode_png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(base64.b64decode(data)))
        return np.asarray(img.convert("RGB"))
    except Exception as exc:
        raise ValidationError(f"cannot decode image payload: {exc}") from exc


def segment_request(image: np.ndarray, prompt: PointPrompt, multimask: bool = True) -> dict:
    return {
        "image_png_b64": encode_png_b64(image),
        "points": [{"x": int(round(x)), "y": int(round(y)), "label": int(lab)} for x, y, lab in prompt.points],
        "multimask": bool(multimask),
    }


def segment_response(result: SegmentationResult) -> dict:
    masks = []
    for m in result.masks:
        h, w = m.shape
        masks.append({"rle_counts": rle_encode(m), "height": h, "width": w})
    return {"masks": masks, "scores": [float(s) for s in result.scores]}


def parse_segment_response(body: dict, shape: tuple[int, int]) -> SegmentationResult:
    try:
        entries = body["masks"]
        scores = [float(s) for s in body["scores"]]
        masks = [rle_decode(e["rle_counts"], int(e["height"]), int(e["width"])) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise SegmenterTransportError(f"malformed segmenter response: {exc}") from exc
    for m in masks:
        if m.shape != tuple(shape):
            raise IntegrityError(f"segmenter returned a {m.shape} mask for a {tuple(shape)} image")
    return SegmentationResult(masks, scores)


class ServiceSegmenter:
    """Client for a remote ``POST /segment`` service.

    ``client`` may be any ``httpx.Client`` (e.g. a FastAPI ``TestClient``);
    otherwise one is built for ``url``. In-flight requests are capped by
    ``max_in_flight``.
    """

    def __init__(
        self,
        url: str | None = None,
        client: httpx.Client | None = None,
        timeout: float = 30.0,
        max_in_flight: int = 4,
        multimask: bool = True,
    ):
        if client is None:
            if not url:
                raise ValidationError("service segmenter needs a url or a client")
            client = httpx.Client(base_url=url.rstrip("/"), timeout=timeout)
        self.client = client
        self.multimask = multimask
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def segment(self, image: np.ndarray, prompt: PointPrompt) -> SegmentationResult:
        h, w = image.shape[:2]
        prompt.check_bounds(h, w)
        payload = segment_request(image, prompt, self.multimask)
        with self._slots:
            try:
                resp = self.client.post("/segment", json=payload)
            except httpx.HTTPError as exc:
                raise SegmenterTransportError(f"segmenter request failed: {exc}") from exc
        if resp.status_code != 200:
            raise SegmenterTransportError(f"segmenter answered HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise SegmenterTransportError("segmenter answered with non-JSON body") from exc
        return parse_segment_response(body, (h, w))


def backend_from_env(kind: str | None = None) -> SegmenterBackend:
    """``kind`` of ``"mock"``/``"service"`` forces a backend; otherwise the
    presence of ``FAS_SEGMENTER_URL`` decides."""
    url = os.environ.get(SEGMENTER_URL_ENV)
    if kind == "mock" or (kind is None and not url):
        return MockSegmenter()
    if not url:
        raise ValidationError(f"service segmenter selected but {SEGMENTER_URL_ENV} is not set")
    return ServiceSegmenter(url)


def segment(image: np.ndarray, prompt: PointPrompt, backend: SegmenterBackend) -> SegmentationResult:
    return backend.segment(image, prompt)


def select_mask(
    result: SegmentationResult,
    policy: str = "max_score",
    polygon: np.ndarray | None = None,
    label: str = "background",
    source_region: str = "",
) -> RegionMask:
    """Pick one candidate mask. ``max_overlap_with_hull`` ranks by IoU with
    the filled ``polygon``. Ties go to the lowest index."""
    if policy == "max_score":
        keys = list(result.scores)
    elif policy == "max_overlap_with_hull":
        if polygon is None:
            raise ValidationError("max_overlap_with_hull needs a polygon")
        hull = fill_convex_polygon(polygon, result.masks[0].shape)
        keys = []
        for m in result.masks:
            union = np.count_nonzero(m | hull)
            keys.append(np.count_nonzero(m & hull) / union if union else 0.0)
    else:
        raise ValidationError(f"unknown selection policy {policy!r}")
    best = int(np.argmax(keys))  # argmax returns the first maximum
    return RegionMask(result.masks[best], label, source_region)
