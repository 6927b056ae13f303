"""Training loop, scoring and protocol evaluation on manifests."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from ..annotator import LabelingPolicy, annotate_sample, read_map
from ..core import FASError, LandmarkSet, ThreeChannelMap, ValidationError
from ..decision import DecisionConfig, attack_intensity, compute_areas, living_intensity, predict, score
from ..evalkit import (
    EvalReport,
    ScoredSample,
    acer,
    run_cross_protocol,
    run_intra_protocol,
    run_loo_protocol,
    threshold_at_bpcer,
)
from ..mcrea import AugmentConfig, Batch, BatchItem, mcrea_augment
from ..network import DualCDCN, LossConfig, ModelConfig, load_checkpoint, predict_maps, save_checkpoint, total_loss
from ..segmenter import MockSegmenter
from .annotate import prepare_sample
from .manifest import ManifestEntry, load_manifest, load_sample

log = logging.getLogger(__name__)

AUGMENT_ORDER = ["mcrea", "horizontal_flip", "random_crop"]


class TrainingDivergedError(FASError):
    """The loss became non-finite."""


@dataclass
class TrainConfig:
    manifest: str = ""
    out: str = "runs/train"
    batch_size: int = 16
    learning_rate: float = 0.002
    epochs: int = 30
    lr_halving_period: int = 200
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    flips: bool = True
    crops: bool = True
    crop_pad: int = 4
    holdout: str | None = None
    loo: bool = False
    epsilon: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    policy: LabelingPolicy = field(default_factory=LabelingPolicy)

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.learning_rate <= 0 or self.epochs < 1 or self.lr_halving_period < 1:
            raise ValidationError("batch size, learning rate, epochs and halving period must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=160, learning_rate=0.002, epochs=500, lr_halving_period=200)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
        obj = dict(obj)
        try:
            if obj.get("augment") is not None:
                obj["augment"] = AugmentConfig(**obj["augment"])
            if "model" in obj:
                obj["model"] = ModelConfig(**obj["model"])
            if "loss" in obj:
                obj["loss"] = LossConfig(**obj["loss"])
            if "policy" in obj:
                obj["policy"] = LabelingPolicy.from_json(obj["policy"])
            return cls(**obj)
        except TypeError as exc:
            raise ValidationError(f"malformed train config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read train config {path}: {exc}") from exc
        cfg = cls.from_json(obj)
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str(path.parent / cfg.manifest)
        return cfg

    def to_json(self) -> dict:
        out = asdict(self)
        out["model"]["input_size"] = list(self.model.input_size)
        for key in ("policy",):
            out[key] = getattr(self, key).to_json()
        return out


@dataclass
class Corpus:
    entries: list[ManifestEntry]
    images: np.ndarray
    labels: np.ndarray
    landmarks: list[LandmarkSet]

    def subset(self, idx) -> "Corpus":
        idx = list(idx)
        return Corpus([self.entries[k] for k in idx], self.images[idx], self.labels[idx], [self.landmarks[k] for k in idx])

    def __len__(self) -> int:
        return len(self.entries)


def load_corpus(manifest_path: str | Path, policy: LabelingPolicy | None = None, need_labels: bool = True) -> Corpus:
    """Images, cached labels (annotated on the fly with the mock segmenter
    when an entry has no ``label_path``) and landmarks."""
    manifest = load_manifest(manifest_path)
    policy = policy or LabelingPolicy()
    backend = MockSegmenter()
    images, labels, lms = [], [], []
    for entry in manifest.entries:
        sample = load_sample(manifest, entry)
        images.append(sample.image)
        lms.append(sample.landmarks)
        if not need_labels:
            continue
        if entry.label_path:
            label = read_map(manifest.resolve(entry.label_path))
        else:
            label = annotate_sample(prepare_sample(sample, policy), policy, backend)
        labels.append(label.stack())
    if len({im.shape for im in images}) > 1:
        raise ValidationError("manifest mixes image sizes")
    h, w = images[0].shape[:2] if images else (0, 0)
    return Corpus(
        list(manifest.entries),
        np.stack(images) if images else np.zeros((0, h, w, 3), np.uint8),
        np.stack(labels) if labels else np.zeros((0, 3, h, w), np.float32),
        lms,
    )


# --------------------------------------------------------------------------- #
# Geometric / photometric augmentation
# --------------------------------------------------------------------------- #


def flip_and_crop(
    images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, flips: bool, crops: bool, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    images, labels = images.copy(), labels.copy()
    n, h, w = images.shape[:3]
    for k in range(n):
        if flips and rng.random() < 0.5:
            images[k] = images[k, :, ::-1]
            labels[k] = labels[k, :, :, ::-1]
        if crops and pad > 0:
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            img = np.pad(images[k], ((pad, pad), (pad, pad), (0, 0)), mode="edge")
            lab = np.pad(labels[k], ((0, 0), (pad, pad), (pad, pad)))
            lab[2] = np.pad(labels[k, 2], pad, constant_values=1.0)
            images[k] = img[dy : dy + h, dx : dx + w]
            labels[k] = lab[:, dy : dy + h, dx : dx + w]
    return images, labels


def _augment_batch(corpus: Corpus, idx: np.ndarray, cfg: TrainConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    images, labels = corpus.images[idx], corpus.labels[idx]
    if cfg.augment is not None and cfg.augment.gamma > 0 and len(idx) >= 2:
        batch = Batch(
            [BatchItem(images[k].copy(), ThreeChannelMap.from_stack(labels[k].copy()), corpus.landmarks[i].copy()) for k, i in enumerate(idx)]
        )
        aug = mcrea_augment(batch, replace(cfg.augment, seed=seed))
        images = np.stack([s.image for s in aug.samples])
        labels = np.stack([s.label.stack() for s in aug.samples])
    rng = np.random.default_rng([cfg.seed, seed, 1])
    return flip_and_crop(images, labels, rng, cfg.flips, cfg.crops, cfg.crop_pad)


# --------------------------------------------------------------------------- #
# Scoring
# --------------------------------------------------------------------------- #


def score_corpus(model: DualCDCN, corpus: Corpus, decision: DecisionConfig | None = None) -> list[dict]:
    decision = decision or DecisionConfig()
    preds = predict_maps(model, corpus.images)
    out = []
    for entry, lm, pred in zip(corpus.entries, corpus.landmarks, preds):
        areas = compute_areas(lm, pred.shape[1:], decision)
        m = ThreeChannelMap.from_stack(pred)
        fa, fr = attack_intensity(m, areas), living_intensity(m, areas)
        out.append(
            {
                "id": entry.id,
                "split": entry.split,
                "truth_label": entry.truth_label,
                "attack_type": entry.attack_type,
                "f_attack": fa,
                "f_real": fr,
                "score": score(fa, fr),
                "verdict": predict(fa, fr, decision),
            }
        )
    return out


def to_scored(rows: list[dict]) -> list[ScoredSample]:
    return [ScoredSample(r["score"], r["truth_label"], r["attack_type"], r["split"], r["id"]) for r in rows]


def _dev_acer(model: DualCDCN, dev: Corpus, eps: float) -> dict:
    """Dev ACER at the fixed margin and at the dev BPCER-1% threshold."""
    if len(dev) == 0:
        return {"dev_acer": None, "dev_acer_calibrated": None}
    scored = to_scored(score_corpus(model, dev))
    if {s.truth_label for s in scored} != {"bona_fide", "attack"}:
        return {"dev_acer": None, "dev_acer_calibrated": None}
    return {"dev_acer": acer(scored, eps), "dev_acer_calibrated": acer(scored, threshold_at_bpcer(scored, 1.0))}


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #


def train(cfg: TrainConfig, corpus: Corpus | None = None) -> dict:
    """Train one model; writes ``<out>/checkpoint`` and ``<out>/train_log.json``.

    Returns the training log.
    """
    if corpus is None:
        if not cfg.manifest:
            raise ValidationError("train config names no manifest")
        corpus = load_corpus(cfg.manifest, cfg.policy)
    train_idx = [
        k
        for k, e in enumerate(corpus.entries)
        if e.split == "train" and not (cfg.holdout and e.attack_type == cfg.holdout)
    ]
    if not train_idx:
        raise ValidationError("train split is empty")
    dev = corpus.subset(
        [k for k, e in enumerate(corpus.entries) if e.split == "dev" and not (cfg.holdout and e.attack_type == cfg.holdout)]
    )
    train_set = corpus.subset(train_idx)
    if tuple(train_set.images.shape[1:3]) != cfg.model.input_size:
        raise ValidationError(f"images are {train_set.images.shape[1:3]}, model expects {cfg.model.input_size}")

    torch.manual_seed(cfg.seed)
    model = DualCDCN(cfg.model)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_halving_period, gamma=0.5)
    rng = np.random.default_rng(cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    history = []
    start = time.time()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            images, labels = _augment_batch(train_set, idx, cfg, seed=int(rng.integers(2**62)))
            x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().div_(255.0)
            y = torch.from_numpy(np.ascontiguousarray(labels))
            loss = total_loss(model(x), y, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b} (lr {sched.get_last_lr()[0]:g})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        lr = sched.get_last_lr()[0]
        sched.step()
        record = {"epoch": epoch, "loss": total / seen, "lr": lr, **_dev_acer(model, dev, cfg.epsilon)}
        record["elapsed_s"] = round(time.time() - start, 2)
        history.append(record)
        log.info("epoch %d loss %.5f dev ACER %s (calibrated %s)", epoch, record["loss"], record["dev_acer"], record["dev_acer_calibrated"])
    ckpt = save_checkpoint(model, out / "checkpoint", cfg.loss, cfg.seed, {"holdout": cfg.holdout})
    train_log = {"augment_order": AUGMENT_ORDER, "config": cfg.to_json(), "epochs": history, "checkpoint": str(ckpt)}
    (out / "train_log.json").write_text(json.dumps(train_log, indent=2))
    return train_log


def train_loo(cfg: TrainConfig, corpus: Corpus | None = None) -> dict[str, dict]:
    """One model per held-out attack type, written to ``<out>/<type>/``."""
    if corpus is None:
        corpus = load_corpus(cfg.manifest, cfg.policy)
    types = sorted({e.attack_type for e in corpus.entries if e.attack_type})
    if len(types) < 2:
        raise ValidationError("leave-one-out training needs at least two attack types")
    logs = {}
    for held in types:
        fold = replace(cfg, holdout=held, loo=False, out=str(Path(cfg.out) / held))
        logs[held] = train(fold, corpus)
    return logs


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #


def _checkpoint_dir(path: Path) -> Path:
    return path / "checkpoint" if (path / "checkpoint" / "config.json").is_file() else path


def evaluate(
    checkpoint: str | Path,
    manifest: str | Path,
    protocol: str = "intra",
    dev_manifest: str | Path | None = None,
    decision: DecisionConfig | None = None,
    target_bpcer: float = 1.0,
) -> tuple[EvalReport, list[dict]]:
    """Score ``manifest`` with a trained model and report under ``protocol``.

    ``loo`` expects ``checkpoint`` to hold one sub-directory per attack type
    (as written by :func:`train_loo`); ``cross`` takes its threshold from
    ``dev_manifest``.
    """
    checkpoint = Path(checkpoint)
    corpus = load_corpus(manifest, need_labels=False)
    if protocol == "intra":
        model, _ = load_checkpoint(_checkpoint_dir(checkpoint))
        rows = score_corpus(model, corpus, decision)
        return run_intra_protocol(to_scored(rows), target_bpcer), rows
    if protocol == "cross":
        if dev_manifest is None:
            raise ValidationError("cross protocol needs a dev manifest")
        model, _ = load_checkpoint(_checkpoint_dir(checkpoint))
        dev_rows = score_corpus(model, load_corpus(dev_manifest, need_labels=False), decision)
        rows = score_corpus(model, corpus, decision)
        dev = [s for s in to_scored(dev_rows) if s.split == "dev"] or to_scored(dev_rows)
        test = [s for s in to_scored(rows) if s.split == "test"] or to_scored(rows)
        return run_cross_protocol(dev, test), rows
    if protocol == "loo":
        types = sorted({e.attack_type for e in corpus.entries if e.attack_type})
        all_rows: list[dict] = []

        def fold(held: str) -> list[ScoredSample]:
            path = checkpoint / held
            if not path.is_dir():
                raise ValidationError(f"no fold checkpoint for attack type {held!r} under {checkpoint}")
            model, _ = load_checkpoint(_checkpoint_dir(path))
            rows = score_corpus(model, corpus, decision)
            all_rows.extend({**r, "fold": held} for r in rows)
            return to_scored(rows)

        return run_loo_protocol(fold, types, target_bpcer), all_rows
    raise ValidationError(f"unknown protocol {protocol!r}")


def report_matches_scores(report: EvalReport, rows: list[dict], target_bpcer: float = 1.0) -> bool:
    """Recompute an intra report from dumped per-sample scores."""
    again = run_intra_protocol(to_scored(rows), target_bpcer)
    return all(
        math.isclose(getattr(a, k), getattr(b, k), abs_tol=0.0)
        for a, b in zip(report.folds, again.folds)
        for k in ("threshold", "apcer", "bpcer", "acer")
    )
