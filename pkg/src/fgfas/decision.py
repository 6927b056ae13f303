"""Attack / bona fide verdict from predicted three-channel maps.

The attack intensity is the mean attack-plane value over the whole face; the
living intensity is the mean living-plane value over the key regions (eyes,
nose, mouth by default). A sample is an attack when the attack intensity
exceeds the living intensity by more than ``epsilon``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    LandmarkSet,
    RegionMask,
    ThreeChannelMap,
    ValidationError,
    mask_intersect,
    mask_union,
    region_mask,
)


@dataclass
class DecisionConfig:
    epsilon: float = 0.0
    key_regions: tuple[str, ...] = ("eyes", "nose", "mouth")

    def __post_init__(self) -> None:
        self.key_regions = tuple(self.key_regions)
        if self.epsilon < 0:
            raise ValidationError("epsilon must be non-negative")
        if not self.key_regions:
            raise ValidationError("at least one key region is required")


@dataclass(frozen=True)
class FaceAreas:
    face_area: RegionMask
    key_area: RegionMask


def compute_areas(landmarks: LandmarkSet, shape: tuple[int, int], cfg: DecisionConfig | None = None) -> FaceAreas:
    cfg = cfg or DecisionConfig()
    missing = [r for r in ("face_skin", *cfg.key_regions) if r not in landmarks.region_index]
    if missing:
        raise ValidationError(f"landmarks lack regions {missing}")
    face = region_mask(landmarks, "face_skin", shape)
    keys = mask_union([region_mask(landmarks, r, shape) for r in cfg.key_regions])
    key = mask_intersect(keys, face)
    if not face.bitmap.any() or not key.bitmap.any():
        raise ValidationError("face or key area is empty")
    return FaceAreas(face.relabel("background", "face"), key.relabel("background", "key"))


def _masked_mean(plane: np.ndarray, mask: RegionMask, what: str) -> float:
    if plane.shape != mask.shape:
        raise ValidationError("prediction and area dimensions differ")
    n = mask.count()
    if n == 0:
        raise ValidationError(f"{what} is empty")
    return float(plane[mask.bitmap].astype(np.float64).sum() / n)


def attack_intensity(pred: ThreeChannelMap, areas: FaceAreas) -> float:
    return _masked_mean(pred.attack, areas.face_area, "face area")


def living_intensity(pred: ThreeChannelMap, areas: FaceAreas) -> float:
    return _masked_mean(pred.living, areas.key_area, "key area")


def score(f_attack: float, f_real: float) -> float:
    return float(f_attack) - float(f_real)


def predict(f_attack: float, f_real: float, cfg: DecisionConfig | None = None) -> int:
    eps = (cfg or DecisionConfig()).epsilon
    return int(float(f_attack) > float(f_real) + eps)


def decide(pred: ThreeChannelMap, landmarks: LandmarkSet, cfg: DecisionConfig | None = None) -> dict:
    cfg = cfg or DecisionConfig()
    areas = compute_areas(landmarks, pred.shape, cfg)
    fa, fr = attack_intensity(pred, areas), living_intensity(pred, areas)
    return {"f_attack": fa, "f_real": fr, "score": score(fa, fr), "verdict": predict(fa, fr, cfg)}


def calibrate_epsilon(
    scores: Sequence[float], labels: Sequence[int], grid: Sequence[float] | None = None
) -> tuple[float, float]:
    """Grid-search the margin that minimises ACER on a development split.

    ``labels`` use 1 for attack. Returns ``(epsilon, acer_percent)``; ties go
    to the smaller epsilon.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if not (y == 1).any() or not (y == 0).any():
        raise ValidationError("calibration needs both classes")
    if grid is None:
        grid = np.linspace(0.0, 1.0, 101)
    best = (np.inf, 0.0)
    for eps in grid:
        if eps < 0:
            continue
        flagged = s > eps
        apcer = np.mean(~flagged[y == 1])
        bpcer = np.mean(flagged[y == 0])
        acer = 50.0 * (apcer + bpcer)
        if acer < best[0]:
            best = (acer, float(eps))
    return best[1], best[0]
