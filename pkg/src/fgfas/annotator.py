"""Three-channel annotation maps: labeling policy, assembly and the FGA1 file format.

FGA1 layout (all little-endian)::

    b"FGA1" | height:u32 | width:u32 | attack[H*W]:f32 | living[H*W]:f32 | background[H*W]:f32
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import (
    FormatError,
    IntegrityError,
    RegionMask,
    Sample,
    ThreeChannelMap,
    ValidationError,
    landmark_region_polygon,
    mask_difference,
    mask_invert,
    mask_union,
    region_mask,
)
from .segmenter import SegmenterBackend, build_point_prompts, polygon_prompt, select_mask

MAGIC = b"FGA1"
_HEADER = struct.Struct("<4sII")
CHANNELS = ("attack", "living", "background")


@dataclass
class LabelingPolicy:
    living_regions: tuple[str, ...] = ("face_skin",)
    background_regions: tuple[str, ...] = ("hair", "eyebrows", "ears")
    attack_region_source: str = "pai_regions"
    # attack types whose cue is the whole face rather than a segmentable PAI
    whole_face_attack_types: tuple[str, ...] = ("print", "replay")
    annotation_kind: str = "depth_valued"
    channel_subset: tuple[str, ...] = CHANNELS
    selection: str = "max_score"
    face_skin_selection: str = "max_overlap_with_hull"

    def __post_init__(self) -> None:
        for name in ("living_regions", "background_regions", "whole_face_attack_types", "channel_subset"):
            setattr(self, name, tuple(getattr(self, name)))
        if set(self.living_regions) & set(self.background_regions):
            raise ValidationError("living and background regions overlap")
        if not self.channel_subset or not set(self.channel_subset) <= set(CHANNELS):
            raise ValidationError(f"channel_subset must be a nonempty subset of {CHANNELS}")
        if self.attack_region_source not in ("pai_regions", "whole_face_hull"):
            raise ValidationError(f"unknown attack_region_source {self.attack_region_source!r}")
        if self.annotation_kind not in ("depth_valued", "binary_mask"):
            raise ValidationError(f"unknown annotation_kind {self.annotation_kind!r}")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelingPolicy":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown policy fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "LabelingPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))


def _pai_name(pai, k: int) -> str:
    return f"pai:{pai}" if isinstance(pai, str) else f"pai:polygon{k}"


def segment_regions(sample: Sample, policy: LabelingPolicy, backend: SegmenterBackend) -> list[RegionMask]:
    """Query the backend for every region the policy needs, plus named or
    polygonal PAI regions."""
    lm = sample.landmarks
    missing = [r for r in policy.living_regions if r not in lm.region_index]
    if missing:
        raise ValidationError(f"landmarks lack living regions {missing}")
    wanted = list(policy.living_regions) + [r for r in policy.background_regions if r in lm.region_index]
    masks = []
    for prompt in build_point_prompts(lm, wanted):
        result = backend.segment(sample.image, prompt)
        region = prompt.target_region
        if region == "face_skin":
            mask = select_mask(result, policy.face_skin_selection, landmark_region_polygon(lm, region))
        else:
            mask = select_mask(result, policy.selection)
        label = "living" if region in policy.living_regions else "background"
        masks.append(mask.relabel(label, region))
    for k, pai in enumerate(sample.pai_regions):
        if isinstance(pai, str):
            prompt = build_point_prompts(lm, [pai])[0]
        else:
            prompt = polygon_prompt(pai, _pai_name(pai, k))
        mask = select_mask(backend.segment(sample.image, prompt), policy.selection)
        masks.append(mask.relabel("attack", _pai_name(pai, k)))
    return masks


def face_hull_mask(sample: Sample) -> RegionMask:
    return region_mask(sample.landmarks, "face_skin", sample.shape, label="attack")


def label_regions(
    sample: Sample, masks: Sequence[RegionMask], policy: LabelingPolicy
) -> tuple[RegionMask, RegionMask]:
    """Split region masks into disjoint (attack, living) masks.

    Attack wins contested pixels; background-policy regions are carved out
    of the living mask.
    """
    shape = sample.shape
    if sample.truth_label == "bona_fide" and sample.pai_regions:
        raise IntegrityError(f"bona fide sample {sample.sample_id!r} declares PAI regions")
    if sample.truth_label == "bona_fide":
        attack = mask_union([], shape, "attack", "none")
    elif (
        policy.attack_region_source == "whole_face_hull"
        or sample.attack_type in policy.whole_face_attack_types
        or not sample.pai_regions
    ):
        attack = face_hull_mask(sample)
    else:
        attack = mask_union([m for m in masks if m.label == "attack"], shape, "attack", "pai")
    living = mask_union([m for m in masks if m.source_region in policy.living_regions], shape, "living", "living")
    bg = mask_union([m for m in masks if m.source_region in policy.background_regions], shape)
    living = mask_difference(mask_difference(living, bg), attack, "living")
    return attack, living


def construct_three_channel_map(
    sample: Sample, attack_mask: RegionMask, living_mask: RegionMask, policy: LabelingPolicy
) -> ThreeChannelMap:
    if attack_mask.shape != sample.shape or living_mask.shape != sample.shape:
        raise ValidationError("mask and sample dimensions differ")
    if (attack_mask.bitmap & living_mask.bitmap).any():
        raise IntegrityError("attack and living masks overlap")
    if policy.annotation_kind == "depth_valued":
        if sample.depth is None:
            raise ValidationError(f"sample {sample.sample_id!r} has no depth map")
        depth = sample.depth.values
    else:
        depth = np.ones(sample.shape, dtype=np.float32)
    attack = np.where(attack_mask.bitmap, depth, np.float32(0))
    living = np.where(living_mask.bitmap, depth, np.float32(0))
    background = mask_invert(mask_union([attack_mask, living_mask])).bitmap.astype(np.float32)
    planes = {"attack": attack, "living": living, "background": background}
    for name in CHANNELS:
        if name not in policy.channel_subset:
            planes[name] = np.zeros(sample.shape, dtype=np.float32)
    return ThreeChannelMap(**planes)


def annotate_sample(sample: Sample, policy: LabelingPolicy, backend: SegmenterBackend) -> ThreeChannelMap:
    masks = segment_regions(sample, policy, backend)
    attack, living = label_regions(sample, masks, policy)
    return construct_three_channel_map(sample, attack, living, policy)


# --------------------------------------------------------------------------- #
# FGA1 I/O
# --------------------------------------------------------------------------- #


def map_to_bytes(m: ThreeChannelMap) -> bytes:
    h, w = m.shape
    if h == 0 or w == 0:
        raise FormatError("cannot serialize an empty map")
    return _HEADER.pack(MAGIC, h, w) + m.stack().astype("<f4").tobytes()


def map_from_bytes(data: bytes) -> ThreeChannelMap:
    if len(data) < _HEADER.size:
        raise FormatError("truncated FGA1 header")
    magic, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if h == 0 or w == 0:
        raise FormatError(f"degenerate dimensions {h}x{w}")
    expected = _HEADER.size + 3 * h * w * 4
    if len(data) != expected:
        raise FormatError(f"FGA1 payload is {len(data)} bytes, expected {expected}")
    planes = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(3, h, w).astype(np.float32)
    if not np.isfinite(planes).all() or planes.min() < 0 or planes.max() > 1:
        raise FormatError("FGA1 values outside [0, 1]")
    return ThreeChannelMap.from_stack(planes)


def write_map(m: ThreeChannelMap, path: str | Path) -> None:
    Path(path).write_bytes(map_to_bytes(m))


def read_map(path: str | Path) -> ThreeChannelMap:
    return map_from_bytes(Path(path).read_bytes())


def preview_image(m: ThreeChannelMap) -> np.ndarray:
    return np.rint(np.stack([m.attack, m.living, m.background], axis=-1) * 255).astype(np.uint8)


def export_preview(m: ThreeChannelMap, path: str | Path) -> None:
    """RGB raster with R = attack, G = living, B = background."""
    Image.fromarray(preview_image(m)).save(path)
