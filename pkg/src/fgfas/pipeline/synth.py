"""Procedural face-like corpus with exact landmarks and analytic ground truth.

Bona fide renders are a shaded skin ellipse with eyes, brows, nose, mouth
and hair on a noisy background. Attacks are derived from a bona fide render:

* ``print`` / ``replay``: the whole frame is re-textured (halftone and
  desaturation, or moire stripes and a screen tint);
* ``glasses``: a tinted occluder over the eye region (PAI = named region);
* ``rigidmask``: a smooth plastic occluder over nose and mouth (PAI = polygon).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..core import LandmarkSet, Sample, ValidationError, convex_hull, fill_convex_polygon, region_mask
from .depth import attach_pseudo_depth
from .manifest import Manifest, export_samples, load_manifest

DEFAULT_MIX = {"bona_fide": 0.5, "print": 0.125, "replay": 0.125, "glasses": 0.125, "rigidmask": 0.125}
SPLIT_FRACTIONS = (("train", 0.6), ("dev", 0.2), ("test", 0.2))
PARTIAL_TYPES = ("glasses", "rigidmask")


@dataclass
class SyntheticItem:
    sample: Sample
    occluder: np.ndarray  # ground-truth attack support (empty for bona fide)


def _ellipse(cx: float, cy: float, rx: float, ry: float, n: int, start: float = 0.0, stop: float = 2 * np.pi) -> np.ndarray:
    t = np.linspace(start, stop, n, endpoint=stop - start < 2 * np.pi - 1e-9)
    return np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])


def face_landmarks(rng: np.random.Generator, size: int) -> LandmarkSet:
    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    cy = size / 2 + rng.uniform(-0.02, 0.06) * size
    rx = size * rng.uniform(0.25, 0.30)
    ry = size * rng.uniform(0.33, 0.37)
    eye_y = cy - 0.12 * ry
    eye_dx = 0.42 * rx
    eye_w, eye_h = 0.2 * rx, 0.08 * ry
    parts = {
        "face_skin": _ellipse(cx, cy, rx, ry, 16),
        "eyes": np.vstack([_ellipse(cx - eye_dx, eye_y, eye_w, eye_h, 4), _ellipse(cx + eye_dx, eye_y, eye_w, eye_h, 4)]),
        "eyebrows": np.array(
            [
                [cx - eye_dx - eye_w, eye_y - 0.16 * ry],
                [cx - eye_dx, eye_y - 0.22 * ry],
                [cx - eye_dx + eye_w, eye_y - 0.17 * ry],
                [cx + eye_dx - eye_w, eye_y - 0.17 * ry],
                [cx + eye_dx, eye_y - 0.22 * ry],
                [cx + eye_dx + eye_w, eye_y - 0.16 * ry],
            ]
        ),
        "nose": np.array([[cx, cy - 0.02 * ry], [cx - 0.14 * rx, cy + 0.22 * ry], [cx + 0.14 * rx, cy + 0.22 * ry]]),
        "mouth": _ellipse(cx, cy + 0.48 * ry, 0.32 * rx, 0.09 * ry, 6),
        "forehead": _ellipse(cx, cy - 0.58 * ry, 0.35 * rx, 0.12 * ry, 4),
        "hair": np.vstack(
            [
                _ellipse(cx, cy, 1.14 * rx, 1.14 * ry, 6, 1.25 * np.pi, 1.75 * np.pi),
                _ellipse(cx, cy, 0.96 * rx, 0.96 * ry, 6, 1.25 * np.pi, 1.75 * np.pi),
            ]
        ),
    }
    points, index = [], {}
    for name, pts in parts.items():
        index[name] = tuple(range(len(points), len(points) + len(pts)))
        points.extend(np.clip(pts, 0, size - 1).tolist())
    return LandmarkSet(np.array(points), index)


def _fill(img: np.ndarray, mask: np.ndarray, colour) -> None:
    img[mask] = np.asarray(colour, dtype=np.float64)


def render_bona_fide(rng: np.random.Generator, lm: LandmarkSet, size: int) -> np.ndarray:
    shape = (size, size)
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    bg0, bg1 = rng.uniform(40, 215, 3), rng.uniform(40, 215, 3)
    ramp = (uu / (size - 1))[..., None]
    img = bg0 * (1 - ramp) + bg1 * ramp
    hair_col = rng.uniform(10, 90, 3)
    face = region_mask(lm, "face_skin", shape).bitmap
    skin = np.array([rng.uniform(150, 235), rng.uniform(105, 180), rng.uniform(80, 150)])
    centre = lm.region_points("nose").mean(axis=0)
    fpts = lm.region_points("face_skin")
    rx, ry = np.ptp(fpts[:, 0]) / 2, np.ptp(fpts[:, 1]) / 2
    shade = 1.0 - 0.35 * (((uu - centre[0]) / rx) ** 2 + ((vv - centre[1]) / ry) ** 2)
    img[face] = skin[None, :] * np.clip(shade, 0.55, 1.0)[face][:, None]
    _fill(img, region_mask(lm, "hair", shape).bitmap, hair_col)
    eye_pts = lm.region_points("eyes")
    for half in (eye_pts[:4], eye_pts[4:]):
        m = fill_convex_polygon(convex_hull(half), shape)
        _fill(img, m, (235, 235, 230))
        c = half.mean(axis=0)
        pupil = (uu - c[0]) ** 2 + (vv - c[1]) ** 2 <= 1.6**2
        _fill(img, pupil & m, rng.uniform(20, 80, 3))
    brows = lm.region_points("eyebrows")
    for half in (brows[:3], brows[3:]):
        _fill(img, fill_convex_polygon(convex_hull(half), shape), hair_col)
    nose = fill_convex_polygon(convex_hull(lm.region_points("nose")), shape)
    img[nose] *= 0.85
    _fill(img, region_mask(lm, "mouth", shape).bitmap, (rng.uniform(150, 200), rng.uniform(40, 80), rng.uniform(50, 90)))
    img += rng.normal(0.0, 3.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _retexture_print(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    size = img.shape[0]
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    x = img.astype(np.float64)
    grey = x.mean(axis=2, keepdims=True)
    x = 0.55 * x + 0.45 * grey
    x = 0.8 * x + 30.0
    period = rng.uniform(2.5, 3.5)
    dots = np.cos(2 * np.pi * uu / period) * np.cos(2 * np.pi * vv / period)
    x += 14.0 * dots[..., None]
    x += rng.normal(0.0, 2.0, x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _retexture_replay(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    size = img.shape[0]
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    x = img.astype(np.float64) * 0.85 + np.array([0.0, 12.0, 35.0])
    angle = rng.uniform(0.3, 1.2)
    period = rng.uniform(3.0, 4.5)
    stripes = np.sin(2 * np.pi * (uu * np.cos(angle) + vv * np.sin(angle)) / period)
    x += 16.0 * stripes[..., None]
    rows = (np.arange(size) % 2 == 0)[:, None, None]
    x = np.where(rows, x * 0.92, x)
    x += rng.normal(0.0, 2.0, x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _occlude(rng: np.random.Generator, img: np.ndarray, mask: np.ndarray, kind: str) -> np.ndarray:
    size = img.shape[0]
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    x = img.astype(np.float64)
    if kind == "glasses":
        tint = rng.uniform(20, 70, 3)
        lens = 0.3 * x + 0.7 * tint + 18.0 * np.sin(2 * np.pi * (uu + vv) / 3.0)[..., None]
    else:
        base = rng.uniform(190, 240) * np.array([1.0, 0.97, 0.92])
        lens = base - 25.0 * ((vv - vv[mask].mean()) / max(np.ptp(vv[mask]), 1.0))[..., None] ** 2
        lens += 10.0 * (np.cos(2 * np.pi * uu / 2.0) * np.cos(2 * np.pi * vv / 2.0))[..., None]
    x[mask] = lens[mask]
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def rigidmask_polygon(lm: LandmarkSet) -> list[list[float]]:
    pts = np.vstack([lm.region_points("nose"), lm.region_points("mouth")])
    return np.round(convex_hull(pts), 3).tolist()


def render_sample(rng: np.random.Generator, kind: str, size: int, sample_id: str = "", split: str = "train") -> SyntheticItem:
    lm = face_landmarks(rng, size)
    img = render_bona_fide(rng, lm, size)
    shape = (size, size)
    occluder = np.zeros(shape, dtype=bool)
    pai: list = []
    if kind == "bona_fide":
        label, attack_type = "bona_fide", None
    else:
        label, attack_type = "attack", kind
        if kind == "print":
            img = _retexture_print(rng, img)
            occluder = region_mask(lm, "face_skin", shape).bitmap
        elif kind == "replay":
            img = _retexture_replay(rng, img)
            occluder = region_mask(lm, "face_skin", shape).bitmap
        elif kind == "glasses":
            pai = ["eyes"]
            occluder = region_mask(lm, "eyes", shape).bitmap
            img = _occlude(rng, img, occluder, kind)
        elif kind == "rigidmask":
            poly = rigidmask_polygon(lm)
            pai = [poly]
            occluder = fill_convex_polygon(np.asarray(poly), shape)
            img = _occlude(rng, img, occluder, kind)
        else:
            raise ValidationError(f"unknown synthetic sample kind {kind!r}")
    sample = Sample(img, lm, label, attack_type=attack_type, pai_regions=pai, sample_id=sample_id, split=split)
    return SyntheticItem(attach_pseudo_depth(sample), occluder)


def _allocate(count: int, weights: dict[str, float]) -> list[str]:
    total = sum(weights.values())
    if total <= 0 or any(v < 0 for v in weights.values()):
        raise ValidationError("mix proportions must be non-negative with a positive sum")
    raw = {k: count * v / total for k, v in weights.items()}
    n = {k: int(np.floor(v)) for k, v in raw.items()}
    for k in sorted(raw, key=lambda k: (-(raw[k] - n[k]), k))[: count - sum(n.values())]:
        n[k] += 1
    return [k for k in weights for _ in range(n[k])]


def synth_samples(count: int, seed: int = 0, size: int = 64, mix: dict[str, float] | None = None) -> list[SyntheticItem]:
    """Deterministic in ``(count, seed, size, mix)``. Splits are stratified
    per kind (60/20/20)."""
    if count < 1:
        raise ValidationError("count must be at least 1")
    kinds = _allocate(count, mix or DEFAULT_MIX)
    splits: list[str] = [""] * len(kinds)
    for kind in dict.fromkeys(kinds):
        idx = [k for k, v in enumerate(kinds) if v == kind]
        names = _allocate(len(idx), dict(SPLIT_FRACTIONS))
        for k, name in zip(idx, names):
            splits[k] = name
    order = np.random.default_rng(seed).permutation(len(kinds))
    children = np.random.SeedSequence(seed).spawn(len(kinds))
    items = []
    for pos, k in enumerate(order):
        rng = np.random.default_rng(children[pos])
        items.append(render_sample(rng, kinds[k], size, f"s{pos:05d}", splits[k]))
    return items


def generate_synthetic(
    count: int, out_dir: str | Path, seed: int = 0, size: int = 64, mix: dict[str, float] | None = None
) -> Manifest:
    """Render a corpus to ``out_dir`` (images, landmarks, depth, ground-truth
    occluder masks) and return its manifest."""
    out_dir = Path(out_dir)
    items = synth_samples(count, seed, size, mix)
    path = export_samples([it.sample for it in items], out_dir)
    (out_dir / "gt").mkdir(exist_ok=True)
    for it in items:
        Image.fromarray(it.occluder.astype(np.uint8) * 255).save(out_dir / "gt" / f"{it.sample.sample_id}.png")
    return load_manifest(path)
