"""Domain types and mask / landmark algebra shared by the rest of the package.

Coordinates follow the image convention ``(u, v) = (column, row)`` with the
origin at the top-left pixel; every raster is row-major ``(H, W[, C])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

FACE_REGIONS = (
    "eyes",
    "mouth",
    "eyebrows",
    "forehead",
    "nose",
    "ears",
    "hair",
    "face_skin",
)
MASK_LABELS = ("attack", "living", "background")
TRUTH_LABELS = ("bona_fide", "attack")
SPLITS = ("train", "dev", "test")


class FASError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(FASError, ValueError):
    """Rejected input: a precondition of an operation does not hold."""


class IntegrityError(FASError):
    """Data is internally inconsistent (overlapping masks, bad dimensions...)."""


class FormatError(FASError):
    """A serialized artifact could not be decoded."""


# --------------------------------------------------------------------------- #
# Types
# --------------------------------------------------------------------------- #


@dataclass
class LandmarkSet:
    points: np.ndarray
    region_index: dict[str, tuple[int, ...]]
    extra_regions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.region_index = {k: tuple(int(i) for i in v) for k, v in self.region_index.items()}
        self.extra_regions = tuple(self.extra_regions)
        allowed = set(FACE_REGIONS) | set(self.extra_regions)
        for name, idx in self.region_index.items():
            if name not in allowed:
                raise ValidationError(f"unknown landmark region {name!r}")
            if not idx:
                raise ValidationError(f"region {name!r} has no points")
            if min(idx) < 0 or max(idx) >= len(self.points):
                raise ValidationError(f"region {name!r} references a missing point")

    def region_points(self, region: str) -> np.ndarray:
        if region not in self.region_index:
            raise ValidationError(f"landmark set has no region {region!r}")
        return self.points[list(self.region_index[region])]

    def check_bounds(self, height: int, width: int) -> None:
        p = self.points
        if len(p) and (
            (p[:, 0] < 0).any() or (p[:, 0] >= width).any() or (p[:, 1] < 0).any() or (p[:, 1] >= height).any()
        ):
            raise ValidationError(f"landmarks fall outside the {height}x{width} image")

    def copy(self) -> "LandmarkSet":
        return LandmarkSet(self.points.copy(), dict(self.region_index), self.extra_regions)

    def to_json(self) -> dict:
        return {
            "points": self.points.tolist(),
            "regions": {k: list(v) for k, v in self.region_index.items()},
            "extra_regions": list(self.extra_regions),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LandmarkSet":
        try:
            return cls(obj["points"], obj["regions"], tuple(obj.get("extra_regions", ())))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed landmark document: {exc}") from exc


@dataclass(frozen=True)
class RegionMask:
    bitmap: np.ndarray
    label: str = "background"
    source_region: str = ""

    def __post_init__(self) -> None:
        bitmap = np.asarray(self.bitmap)
        if bitmap.ndim != 2:
            raise ValidationError("mask bitmap must be two-dimensional")
        if bitmap.dtype != np.bool_:
            if not np.isin(bitmap, (0, 1)).all():
                raise ValidationError("mask bitmap values must be 0 or 1")
            bitmap = bitmap.astype(bool)
        if self.label not in MASK_LABELS:
            raise ValidationError(f"mask label must be one of {MASK_LABELS}")
        object.__setattr__(self, "bitmap", bitmap)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bitmap.shape

    def count(self) -> int:
        return int(self.bitmap.sum())

    def relabel(self, label: str, source_region: str | None = None) -> "RegionMask":
        src = self.source_region if source_region is None else source_region
        return RegionMask(self.bitmap, label, src)


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValidationError("depth map must be two-dimensional")
        if not np.isfinite(values).all() or values.min(initial=0.0) < 0 or values.max(initial=0.0) > 1:
            raise ValidationError("depth values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class ThreeChannelMap:
    """Attack / living / background planes, each ``float32`` of shape (H, W)."""

    attack: np.ndarray
    living: np.ndarray
    background: np.ndarray

    def __post_init__(self) -> None:
        self.attack = np.asarray(self.attack, dtype=np.float32)
        self.living = np.asarray(self.living, dtype=np.float32)
        self.background = np.asarray(self.background, dtype=np.float32)
        if not (self.attack.shape == self.living.shape == self.background.shape) or self.attack.ndim != 2:
            raise ValidationError("three-channel planes must share one 2-D shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.attack.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.attack, self.living, self.background])

    @classmethod
    def from_stack(cls, planes: np.ndarray) -> "ThreeChannelMap":
        planes = np.asarray(planes)
        if planes.ndim != 3 or planes.shape[0] != 3:
            raise ValidationError(f"expected (3, H, W) planes, got {planes.shape}")
        return cls(planes[0], planes[1], planes[2])

    def copy(self) -> "ThreeChannelMap":
        return ThreeChannelMap(self.attack.copy(), self.living.copy(), self.background.copy())

    def violations(self) -> list[str]:
        """Return the list of broken map invariants (empty when valid)."""
        out = []
        planes = self.stack()
        if not np.isfinite(planes).all() or planes.min() < 0 or planes.max() > 1:
            out.append("values outside [0, 1]")
        if ((self.attack > 0) & (self.living > 0)).any():
            out.append("attack and living supports overlap")
        if not np.isin(self.background, (0.0, 1.0)).all():
            out.append("background is not binary")
        if ((self.background == 1) & ((self.attack > 0) | (self.living > 0))).any():
            out.append("background set inside an attack/living region")
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ThreeChannelMap):
            return NotImplemented
        return self.stack().tobytes() == other.stack().tobytes() and self.shape == other.shape


PaiRegion = Union[str, list]


@dataclass
class Sample:
    image: np.ndarray
    landmarks: LandmarkSet
    truth_label: str
    depth: DepthMap | None = None
    attack_type: str | None = None
    pai_regions: list = field(default_factory=list)
    sample_id: str = ""
    split: str = "train"

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError("sample image must be (H, W, 3)")
        if self.image.dtype != np.uint8:
            raise ValidationError("sample image must have 8-bit channels")
        if self.truth_label not in TRUTH_LABELS:
            raise ValidationError(f"truth_label must be one of {TRUTH_LABELS}")
        if self.truth_label == "attack" and not self.attack_type:
            raise ValidationError("attack samples need an attack_type")
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}")
        h, w = self.shape
        self.landmarks.check_bounds(h, w)
        if self.depth is not None and self.depth.shape != (h, w):
            raise ValidationError("depth map and image dimensions differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


# --------------------------------------------------------------------------- #
# Mask algebra
# --------------------------------------------------------------------------- #


def _check_same_shape(masks: Sequence[RegionMask]) -> tuple[int, int] | None:
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise ValidationError(f"mask dimensions differ: {sorted(shapes)}")
    return shapes.pop() if shapes else None


def mask_union(
    masks: Iterable[RegionMask],
    shape: tuple[int, int] | None = None,
    label: str = "background",
    source_region: str = "union",
) -> RegionMask:
    masks = list(masks)
    found = _check_same_shape(masks)
    if found is None:
        if shape is None:
            raise ValidationError("empty union needs an explicit shape")
        found = shape
    elif shape is not None and tuple(shape) != found:
        raise ValidationError(f"masks are {found}, expected {tuple(shape)}")
    out = np.zeros(found, dtype=bool)
    for m in masks:
        out |= m.bitmap
    return RegionMask(out, label, source_region)


def mask_intersect(a: RegionMask, b: RegionMask, label: str | None = None) -> RegionMask:
    _check_same_shape([a, b])
    return RegionMask(a.bitmap & b.bitmap, label or a.label, a.source_region)


def mask_difference(a: RegionMask, b: RegionMask, label: str | None = None) -> RegionMask:
    _check_same_shape([a, b])
    return RegionMask(a.bitmap & ~b.bitmap, label or a.label, a.source_region)


def mask_invert(mask: RegionMask, label: str | None = None) -> RegionMask:
    return RegionMask(~mask.bitmap, label or mask.label, mask.source_region)


def normalize_depth(raw: np.ndarray, face_support: RegionMask) -> DepthMap:
    """Rescale ``raw`` to [0, 1] inside ``face_support``; zero elsewhere.

    A flat face (max == min) maps to 1.0 so it still stands out from the
    zero background.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != face_support.shape:
        raise ValidationError("raw depth and support mask dimensions differ")
    inside = face_support.bitmap
    if not inside.any():
        raise ValidationError("face support is empty")
    vals = raw[inside]
    if not np.isfinite(vals).all():
        raise ValidationError("raw depth has non-finite values inside the face")
    lo, hi = vals.min(), vals.max()
    out = np.zeros(raw.shape, dtype=np.float64)
    if hi == lo:
        out[inside] = 1.0
    else:
        out[inside] = (vals - lo) / (hi - lo)
    return DepthMap(np.clip(out, 0.0, 1.0).astype(np.float32))


# --------------------------------------------------------------------------- #
# Polygons
# --------------------------------------------------------------------------- #


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain. Vertices come back with positive signed area
    in (x, y) coordinates; collinear points on edges are dropped."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def landmark_region_polygon(landmarks: LandmarkSet, region: str) -> np.ndarray:
    pts = landmarks.region_points(region)
    if len(pts) < 3:
        raise ValidationError(f"region {region!r} has {len(pts)} points; a polygon needs 3")
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise ValidationError(f"region {region!r} is degenerate (collinear points)")
    return hull


def fill_convex_polygon(poly: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Boolean raster of the pixels whose integer (u, v) lies inside or on
    the convex polygon ``poly`` (positive orientation)."""
    poly = np.asarray(poly, dtype=np.float64)
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    if len(poly) < 3 or abs(polygon_area(poly)) < 1e-12:
        raise ValidationError("polygon is degenerate")
    if polygon_area(poly) < 0:
        poly = poly[::-1]
    u0 = max(int(np.floor(poly[:, 0].min())), 0)
    u1 = min(int(np.ceil(poly[:, 0].max())), w - 1)
    v0 = max(int(np.floor(poly[:, 1].min())), 0)
    v1 = min(int(np.ceil(poly[:, 1].max())), h - 1)
    if u0 > u1 or v0 > v1:
        return out
    vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1].astype(np.float64)
    inside = np.ones(uu.shape, dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        edge = (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0])
        inside &= edge >= -1e-9 * max(1.0, abs(b[0] - a[0]) + abs(b[1] - a[1]))
    out[v0 : v1 + 1, u0 : u1 + 1] = inside
    return out


def hull_mask(points: np.ndarray, shape: tuple[int, int], label: str = "background", source_region: str = "") -> RegionMask:
    hull = convex_hull(points)
    if len(hull) < 3:
        raise ValidationError("cannot fill the hull of fewer than 3 non-collinear points")
    return RegionMask(fill_convex_polygon(hull, shape), label, source_region)


def region_mask(landmarks: LandmarkSet, region: str, shape: tuple[int, int], label: str = "background") -> RegionMask:
    return RegionMask(fill_convex_polygon(landmark_region_polygon(landmarks, region), shape), label, region)
