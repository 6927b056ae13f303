"""Offline annotation stage: manifest in, cached FGA1 labels + manifest out."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from ..annotator import LabelingPolicy, annotate_sample, write_map
from ..core import Sample
from ..segmenter import SegmenterBackend
from .depth import attach_pseudo_depth
from .manifest import Manifest, load_manifest, load_sample

log = logging.getLogger(__name__)


def prepare_sample(sample: Sample, policy: LabelingPolicy) -> Sample:
    if sample.depth is None and policy.annotation_kind == "depth_valued":
        return attach_pseudo_depth(sample)
    return sample


def annotate_manifest(
    manifest_path: str | Path,
    out_dir: str | Path,
    policy: LabelingPolicy,
    backend: SegmenterBackend,
    workers: int = 4,
) -> Path:
    """Annotate every entry; writes ``<out>/labels/<id>.fga1`` and
    ``<out>/manifest.jsonl`` (the input entries plus ``label_path``)."""
    manifest = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    def work(entry):
        sample = prepare_sample(load_sample(manifest, entry), policy)
        label = annotate_sample(sample, policy, backend)
        target = out_dir / "labels" / f"{entry.id}.fga1"
        write_map(label, target)
        return target

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        targets = list(pool.map(work, manifest.entries))
    entries = []
    for entry, target in zip(manifest.entries, targets):
        fields = {"label_path": str(target.resolve())}
        for name in ("image_path", "landmarks_path", "depth_path"):
            rel = getattr(entry, name)
            if rel:
                fields[name] = str(manifest.resolve(rel).resolve())
        entries.append(replace(entry, **fields))
    path = out_dir / "manifest.jsonl"
    Manifest(entries, out_dir).write(path)
    log.info("annotated %d samples into %s", len(entries), out_dir)
    return path
