"""JSON-lines manifests and sample (de)serialization.

Each manifest line describes one sample; relative paths resolve against the
manifest's directory::

    {"id": "s0001", "image_path": "img/s0001.png", "landmarks_path": "lm/s0001.json",
     "depth_path": "depth/s0001.npy", "truth_label": "attack", "attack_type": "glasses",
     "pai_regions": ["eyes"], "split": "train", "label_path": "labels/s0001.fga1"}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from ..core import SPLITS, DepthMap, LandmarkSet, Sample, ValidationError


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    landmarks_path: str
    truth_label: str
    split: str
    depth_path: str | None = None
    attack_type: str | None = None
    pai_regions: list = field(default_factory=list)
    label_path: str | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(json.dumps(e.to_json()) + "\n" for e in self.entries))


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entry = ManifestEntry(**obj)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed entry ({exc})") from exc
        if entry.split not in SPLITS:
            raise ValidationError(f"{path}:{lineno}: split must be one of {SPLITS}")
        if entry.truth_label == "attack" and not entry.attack_type:
            raise ValidationError(f"{path}:{lineno}: attack entry without attack_type")
        entries.append(entry)
    return Manifest(entries, path.parent)


def read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise ValidationError(f"missing image file {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_sample(manifest: Manifest, entry: ManifestEntry) -> Sample:
    image = read_image(manifest.resolve(entry.image_path))
    lm_path = manifest.resolve(entry.landmarks_path)
    if not lm_path.is_file():
        raise ValidationError(f"missing landmark file {lm_path}")
    landmarks = LandmarkSet.from_json(json.loads(lm_path.read_text()))
    depth = None
    if entry.depth_path:
        d_path = manifest.resolve(entry.depth_path)
        if not d_path.is_file():
            raise ValidationError(f"missing depth file {d_path}")
        depth = DepthMap(np.load(d_path))
    return Sample(
        image=image,
        landmarks=landmarks,
        truth_label=entry.truth_label,
        depth=depth,
        attack_type=entry.attack_type,
        pai_regions=list(entry.pai_regions),
        sample_id=entry.id,
        split=entry.split,
    )


def ingest(manifest_path: str | Path) -> list[Sample]:
    manifest = load_manifest(manifest_path)
    out = []
    for lineno, entry in enumerate(manifest.entries, start=1):
        try:
            out.append(load_sample(manifest, entry))
        except ValidationError as exc:
            raise ValidationError(f"{manifest_path}: entry {lineno} ({entry.id}): {exc}") from exc
    return out


def export_samples(samples: Iterable[Sample], out_dir: str | Path, name: str = "manifest.jsonl") -> Path:
    """Write images, landmarks and depth under ``out_dir`` plus a manifest."""
    out_dir = Path(out_dir)
    for sub in ("images", "landmarks", "depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        sid = s.sample_id or f"s{k:05d}"
        Image.fromarray(s.image).save(out_dir / "images" / f"{sid}.png")
        (out_dir / "landmarks" / f"{sid}.json").write_text(json.dumps(s.landmarks.to_json()))
        depth_rel = None
        if s.depth is not None:
            depth_rel = f"depth/{sid}.npy"
            np.save(out_dir / depth_rel, s.depth.values)
        entries.append(
            ManifestEntry(
                id=sid,
                image_path=f"images/{sid}.png",
                landmarks_path=f"landmarks/{sid}.json",
                truth_label=s.truth_label,
                split=s.split,
                depth_path=depth_rel,
                attack_type=s.attack_type,
                pai_regions=list(s.pai_regions),
            )
        )
    path = out_dir / name
    Manifest(entries, out_dir).write(path)
    return path
