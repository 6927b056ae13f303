"""Multi-channel region exchange augmentation (MCREA).

Semantic face regions are transplanted between samples of one batch. The
donor region is aligned onto the target region with a least-squares
similarity transform fitted on the two regions' landmarks, and the RGB
planes, label planes and landmarks are edited in lockstep.

Schemes:

``overlay``
    donor region alpha-blended over the target (``alpha=1`` is a plain paste);
    labels and landmarks follow the donor where ``alpha >= 0.5``.
``integrated_attack``
    only donor pixels carrying attack labels are transplanted.
``clipping_exchange``
    equal-size rectangles around the two regions are swapped both ways.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FASError,
    LandmarkSet,
    ThreeChannelMap,
    ValidationError,
    convex_hull,
    fill_convex_polygon,
)

log = logging.getLogger(__name__)

SCHEMES = ("overlay", "integrated_attack", "clipping_exchange")


class SingularFitError(FASError):
    """Landmark configuration does not determine a similarity transform."""


@dataclass
class AugmentConfig:
    gamma: float = 0.5
    rho: int = 1
    scheme: str = "overlay"
    seed: int = 0
    alpha: float = 1.0
    regions: tuple[str, ...] | None = None
    max_retries: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError("gamma must lie in [0, 1]")
        if int(self.rho) != self.rho or self.rho < 1:
            raise ValidationError("rho must be a positive integer")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"scheme must be one of {SCHEMES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if self.regions is not None:
            self.regions = tuple(self.regions)


@dataclass
class BatchItem:
    image: np.ndarray
    label: ThreeChannelMap
    landmarks: LandmarkSet

    def copy(self) -> "BatchItem":
        return BatchItem(self.image.copy(), self.label.copy(), self.landmarks.copy())


@dataclass
class Batch:
    samples: list[BatchItem]
    draw_log: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        shapes = {s.image.shape[:2] for s in self.samples} | {s.label.shape for s in self.samples}
        if len(shapes) > 1:
            raise ValidationError(f"batch mixes dimensions {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)


# --------------------------------------------------------------------------- #
# Alignment
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: float
    translation: np.ndarray

    @property
    def linear(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.linear.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ np.linalg.inv(self.linear).T


def _check_spread(points: np.ndarray, what: str) -> None:
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if len(points) < 3 or sv[-1] <= 1e-9 * max(sv[0], 1.0):
        raise SingularFitError(f"{what} landmarks are collinear or too few")


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares rotation + uniform scale + translation with
    ``dst ~= s * R @ src + t`` (Umeyama's closed form)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise SingularFitError(f"point sets do not correspond: {src.shape} vs {dst.shape}")
    _check_spread(src, "source")
    _check_spread(dst, "target")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[1, 1] = -1
    rot = u @ sign @ vt
    scale = float(np.trace(np.diag(d) @ sign) / xs.var(axis=0).sum())
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, float(np.arctan2(rot[1, 0], rot[0, 0])), trans)


@dataclass
class RegionWarp:
    """Nearest-neighbour pull map from donor pixels into target pixels."""

    mask: np.ndarray
    src_rows: np.ndarray
    src_cols: np.ndarray
    transform: SimilarityTransform

    def sample(self, donor: np.ndarray) -> np.ndarray:
        block = np.zeros(self.mask.shape + donor.shape[2:], dtype=donor.dtype)
        block[self.mask] = donor[self.src_rows, self.src_cols]
        return block


def region_warp(
    donor_points: np.ndarray,
    target_points: np.ndarray,
    shape: tuple[int, int],
    donor_support: np.ndarray | None = None,
) -> RegionWarp:
    transform = fit_similarity(donor_points, target_points)
    h, w = shape
    target_hull = convex_hull(target_points)
    candidates = fill_convex_polygon(target_hull, shape)
    if donor_support is None:
        donor_support = fill_convex_polygon(convex_hull(donor_points), shape)
    rows, cols = np.nonzero(candidates)
    src = transform.apply_inverse(np.column_stack([cols, rows]).astype(np.float64))
    su = np.rint(src[:, 0]).astype(np.int64)
    sv = np.rint(src[:, 1]).astype(np.int64)
    ok = (su >= 0) & (su < w) & (sv >= 0) & (sv < h)
    ok[ok] = donor_support[sv[ok], su[ok]]
    mask = np.zeros(shape, dtype=bool)
    mask[rows[ok], cols[ok]] = True
    return RegionWarp(mask, sv[ok], su[ok], transform)


def align_region(
    donor_pixels: np.ndarray,
    donor_landmarks: np.ndarray,
    target_landmarks: np.ndarray,
    donor_support: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``donor_pixels`` onto the target region's hull.

    Returns the warped block (zeros outside the mask) and the boolean mask of
    target pixels that received a donor value.
    """
    warp = region_warp(donor_landmarks, target_landmarks, donor_pixels.shape[:2], donor_support)
    return warp.sample(donor_pixels), warp.mask


# --------------------------------------------------------------------------- #
# Schemes
# --------------------------------------------------------------------------- #


def _refresh_background(label: ThreeChannelMap) -> None:
    inside = (label.attack > 0) | (label.living > 0)
    label.background[inside] = 0.0


def _write(item: BatchItem, mask: np.ndarray, image_block: np.ndarray, label_block: np.ndarray | None) -> None:
    item.image[mask] = image_block[mask]
    if label_block is not None:
        planes = item.label.stack()
        planes[:, mask] = label_block[:, mask]
        item.label = ThreeChannelMap.from_stack(planes)
        _refresh_background(item.label)


def region_box(points: np.ndarray, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    """Inclusive integer bounding box ``(row0, col0, row1, col1)``."""
    h, w = shape
    c0 = max(int(np.floor(points[:, 0].min())), 0)
    c1 = min(int(np.ceil(points[:, 0].max())), w - 1)
    r0 = max(int(np.floor(points[:, 1].min())), 0)
    r1 = min(int(np.ceil(points[:, 1].max())), h - 1)
    return r0, c0, r1, c1


def matching_box(box: tuple[int, int, int, int], points: np.ndarray, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    """Box of the same size as ``box`` centred on ``points``' bounding box."""
    h, w = shape
    bh, bw = box[2] - box[0] + 1, box[3] - box[1] + 1
    r0, c0, r1, c1 = region_box(points, shape)
    top = int(np.clip((r0 + r1 + 1) // 2 - bh // 2, 0, h - bh))
    left = int(np.clip((c0 + c1 + 1) // 2 - bw // 2, 0, w - bw))
    return top, left, top + bh - 1, left + bw - 1


def clipping_exchange(
    a: BatchItem,
    b: BatchItem,
    box_a: tuple[int, int, int, int],
    box_b: tuple[int, int, int, int],
    region_a: str | None = None,
    region_b: str | None = None,
) -> tuple[BatchItem, BatchItem]:
    """Swap two equal-size rectangles between ``a`` and ``b`` (images, labels
    and, when given, the landmarks of the two regions)."""
    if (box_a[2] - box_a[0], box_a[3] - box_a[1]) != (box_b[2] - box_b[0], box_b[3] - box_b[1]):
        raise ValidationError("clipping boxes differ in size")
    a, b = a.copy(), b.copy()
    sa = np.s_[box_a[0] : box_a[2] + 1, box_a[1] : box_a[3] + 1]
    sb = np.s_[box_b[0] : box_b[2] + 1, box_b[1] : box_b[3] + 1]
    a.image[sa], b.image[sb] = b.image[sb].copy(), a.image[sa].copy()
    pa, pb = a.label.stack(), b.label.stack()
    pa[(slice(None),) + sa], pb[(slice(None),) + sb] = pb[(slice(None),) + sb].copy(), pa[(slice(None),) + sa].copy()
    a.label, b.label = ThreeChannelMap.from_stack(pa), ThreeChannelMap.from_stack(pb)
    if region_a is not None and region_b is not None:
        ia = list(a.landmarks.region_index[region_a])
        ib = list(b.landmarks.region_index[region_b])
        if len(ia) == len(ib):
            offset = np.array([box_a[1] - box_b[1], box_a[0] - box_b[0]], dtype=np.float64)
            pts_a, pts_b = a.landmarks.points[ia].copy(), b.landmarks.points[ib].copy()
            a.landmarks.points[ia] = pts_b + offset
            b.landmarks.points[ib] = pts_a - offset
    return a, b


def apply_scheme(
    target: BatchItem,
    donor: BatchItem,
    region_t: str,
    region_d: str,
    scheme: str = "overlay",
    alpha: float = 1.0,
) -> tuple[BatchItem, BatchItem, np.ndarray]:
    """Run one exchange. Returns ``(new_target, new_donor, written_mask)``
    where ``written_mask`` marks target pixels whose RGB was rewritten."""
    shape = target.image.shape[:2]
    tpts = target.landmarks.region_points(region_t)
    dpts = donor.landmarks.region_points(region_d)
    if scheme == "clipping_exchange":
        box_t = region_box(tpts, shape)
        box_d = matching_box(box_t, dpts, shape)
        new_t, new_d = clipping_exchange(target, donor, box_t, box_d, region_t, region_d)
        mask = np.zeros(shape, dtype=bool)
        mask[box_t[0] : box_t[2] + 1, box_t[1] : box_t[3] + 1] = True
        return new_t, new_d, mask
    support = fill_convex_polygon(convex_hull(dpts), shape)
    if scheme == "integrated_attack":
        support &= donor.label.attack > 0
    elif scheme != "overlay":
        raise ValidationError(f"unknown scheme {scheme!r}")
    warp = region_warp(dpts, tpts, shape, support)
    out = target.copy()
    img_block = warp.sample(donor.image)
    if scheme == "overlay" and alpha < 1.0:
        blend = alpha * img_block.astype(np.float64) + (1.0 - alpha) * target.image.astype(np.float64)
        img_block = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    write_labels = scheme == "integrated_attack" or alpha >= 0.5
    label_block = None
    if write_labels:
        label_block = np.moveaxis(warp.sample(np.moveaxis(donor.label.stack(), 0, -1)), -1, 0)
    _write(out, warp.mask, img_block, label_block)
    if scheme == "overlay" and write_labels and warp.mask.any():
        idx = list(out.landmarks.region_index[region_t])
        h, w = shape
        moved = warp.transform.apply(dpts)
        moved[:, 0] = np.clip(moved[:, 0], 0, w - 1)
        moved[:, 1] = np.clip(moved[:, 1], 0, h - 1)
        if len(moved) == len(idx):
            out.landmarks.points[idx] = moved
    return out, donor, warp.mask


# --------------------------------------------------------------------------- #
# Batch augmentation
# --------------------------------------------------------------------------- #


def exchangeable_regions(landmarks: LandmarkSet, allowed: tuple[str, ...] | None = None) -> list[str]:
    names = sorted(landmarks.region_index)
    if allowed is not None:
        names = [n for n in names if n in allowed]
    return [n for n in names if len(landmarks.region_index[n]) >= 3]


def mcrea_augment(batch: Batch, cfg: AugmentConfig) -> Batch:
    """Augment the first ``floor(gamma * N)`` samples, ``rho`` exchanges each.

    The returned batch carries a ``draw_log`` with one record per step so a
    run can be replayed.
    """
    rng = np.random.default_rng(cfg.seed)
    items = [s.copy() for s in batch.samples]
    n = len(items)
    n_aug = int(np.floor(cfg.gamma * n))
    if n_aug >= 1 and n < 2:
        raise ValidationError("region exchange needs a batch of at least 2")
    draws: list[dict] = []
    for i in range(n_aug):
        for step in range(cfg.rho):
            record = {"i": i, "step": step, "scheme": cfg.scheme, "skipped": False}
            regions = exchangeable_regions(items[i].landmarks, cfg.regions)
            if not regions:
                log.warning("sample %d has no exchangeable region; skipping step %d", i, step)
                draws.append({**record, "skipped": True})
                continue
            region_i = str(regions[rng.integers(len(regions))])
            record["region_i"] = region_i
            donor_pool = [k for k in range(n) if k != i]
            done = False
            for attempt in range(cfg.max_retries + 1):
                j = int(donor_pool[rng.integers(len(donor_pool))])
                donor_regions = [r for r in exchangeable_regions(items[j].landmarks, cfg.regions) if r == region_i]
                if not donor_regions:
                    continue
                region_j = donor_regions[rng.integers(len(donor_regions))]
                try:
                    new_i, new_j, mask = apply_scheme(items[i], items[j], region_i, region_j, cfg.scheme, cfg.alpha)
                except SingularFitError:
                    continue
                if not mask.any():
                    # degenerate hull, nothing landed on the target
                    continue
                items[i], items[j] = new_i, new_j
                draws.append({**record, "j": j, "region_j": region_j, "attempts": attempt + 1, "pixels": int(mask.sum())})
                done = True
                break
            if not done:
                log.warning("no alignable donor for sample %d region %s; skipping step %d", i, region_i, step)
                draws.append({**record, "skipped": True})
    return Batch(items, draws)
