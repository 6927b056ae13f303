"""Analytic pseudo-depth for samples without a depth channel."""

from __future__ import annotations

import dataclasses

import numpy as np

from ..core import DepthMap, RegionMask, Sample, ValidationError, convex_hull, fill_convex_polygon, normalize_depth


def hull_gauge(hull: np.ndarray, centre: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Minkowski gauge of the convex ``hull`` around ``centre``: 0 at the
    centre, 1 on the boundary, growing linearly along every ray."""
    h, w = shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    gauge = np.zeros(shape)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        d = b - a
        normal = np.array([d[1], -d[0]])  # outward for positive orientation
        reach = normal @ (a - centre)
        if reach <= 0:
            raise ValidationError("depth peak lies outside the face hull")
        gauge = np.maximum(gauge, (normal[0] * (uu - centre[0]) + normal[1] * (vv - centre[1])) / reach)
    return gauge


def pseudo_depth(sample: Sample) -> DepthMap:
    lm = sample.landmarks
    if "face_skin" not in lm.region_index:
        raise ValidationError("pseudo depth needs a face_skin region")
    hull = convex_hull(lm.region_points("face_skin"))
    if len(hull) < 3:
        raise ValidationError("face_skin landmarks are degenerate")
    shape = sample.shape
    support = fill_convex_polygon(hull, shape)
    centre_src = lm.region_points("nose") if "nose" in lm.region_index else hull
    centre = np.rint(centre_src.mean(axis=0))
    if not support[int(centre[1]), int(centre[0])]:
        centre = np.rint(hull.mean(axis=0))
    gauge = hull_gauge(hull, centre, shape)
    raw = np.clip(1.0 - gauge**2, 0.0, None)
    return normalize_depth(raw, RegionMask(support))


def attach_pseudo_depth(sample: Sample) -> Sample:
    """Peak at the (rounded) nose centroid, decaying to 0 at the face hull."""
    if sample.depth is not None:
        raise ValidationError(f"sample {sample.sample_id!r} already has depth")
    return dataclasses.replace(sample, depth=pseudo_depth(sample))
