"""Presentation-attack metrics (APCER / BPCER / ACER / HTER), threshold
selection and protocol runners.

Scores are "higher = more attack-like"; a sample is classified as an attack
when ``score > threshold``. All metric values are percentages.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .core import FASError, ValidationError

log = logging.getLogger(__name__)


class UndefinedMetricError(FASError, ValueError):
    """A metric was requested for a class with no samples."""


@dataclass(frozen=True)
class ScoredSample:
    score: float
    truth_label: str
    attack_type: str | None = None
    split: str = "test"
    sample_id: str = ""

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValidationError(f"non-finite score for {self.sample_id!r}")
        if self.truth_label not in ("bona_fide", "attack"):
            raise ValidationError(f"bad truth label {self.truth_label!r}")

    @property
    def is_attack(self) -> bool:
        return self.truth_label == "attack"


def _scores(samples: Sequence[ScoredSample], attack: bool) -> np.ndarray:
    return np.array([s.score for s in samples if s.is_attack == attack], dtype=np.float64)


def apcer_by_type(samples: Sequence[ScoredSample], threshold: float) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for s in samples:
        if s.is_attack:
            groups.setdefault(s.attack_type or "unknown", []).append(s.score)
    if not groups:
        raise UndefinedMetricError("APCER needs at least one attack sample")
    return {t: 100.0 * float(np.mean(np.asarray(v) <= threshold)) for t, v in sorted(groups.items())}


def apcer(samples: Sequence[ScoredSample], threshold: float, per_type: bool = True) -> float:
    """Share of attacks scored ``<= threshold``; the worst attack type when
    several are present and ``per_type`` is set."""
    if per_type:
        return max(apcer_by_type(samples, threshold).values())
    att = _scores(samples, True)
    if att.size == 0:
        raise UndefinedMetricError("APCER needs at least one attack sample")
    return 100.0 * float(np.mean(att <= threshold))


def bpcer(samples: Sequence[ScoredSample], threshold: float) -> float:
    bona = _scores(samples, False)
    if bona.size == 0:
        raise UndefinedMetricError("BPCER needs at least one bona fide sample")
    return 100.0 * float(np.mean(bona > threshold))


def acer(samples: Sequence[ScoredSample], threshold: float, per_type: bool = True) -> float:
    return (apcer(samples, threshold, per_type) + bpcer(samples, threshold)) / 2.0


def candidate_thresholds(samples: Sequence[ScoredSample]) -> np.ndarray:
    """One threshold per distinct operating point: just below the minimum,
    then every distinct score."""
    u = np.unique([s.score for s in samples])
    if u.size == 0:
        raise UndefinedMetricError("no samples")
    return np.concatenate(([u[0] - 1.0], u))


def threshold_sweep(samples: Sequence[ScoredSample], per_type: bool = True) -> list[dict]:
    rows = []
    for t in candidate_thresholds(samples):
        a, b = apcer(samples, t, per_type), bpcer(samples, t)
        rows.append({"threshold": float(t), "apcer": a, "bpcer": b, "acer": (a + b) / 2.0})
    return rows


def threshold_at_bpcer(dev_samples: Sequence[ScoredSample], target: float = 1.0) -> float:
    """Smallest threshold whose BPCER on ``dev_samples`` is at most ``target`` percent."""
    bona = np.sort(_scores(dev_samples, False))[::-1]
    n = bona.size
    if n == 0:
        raise UndefinedMetricError("threshold selection needs bona fide samples")
    if n * target < 100.0:
        log.info("only %d bona fide samples; BPCER %.3g%% is coarsely resolved", n, target)
    allowed = int(math.floor(target * n / 100.0 + 1e-9))
    if allowed >= n:
        return float(bona[-1])
    return float(bona[allowed])


def eer_threshold(samples: Sequence[ScoredSample]) -> float:
    """Midpoint of the score interval minimising |FAR - FRR|; ties go to the
    lower threshold."""
    att, bona = _scores(samples, True), _scores(samples, False)
    if att.size == 0 or bona.size == 0:
        raise UndefinedMetricError("EER needs both classes")
    u = np.unique(np.concatenate([att, bona]))
    # operating points: below everything, [u_k, u_k+1) for each k, above everything
    reps = np.concatenate(([u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1]]))
    best_gap, best_t = np.inf, reps[0]
    for t in reps:
        gap = abs(np.mean(att <= t) - np.mean(bona > t))
        if gap < best_gap - 1e-12:
            best_gap, best_t = gap, t
    return float(best_t)


def hter(dev_samples: Sequence[ScoredSample], test_samples: Sequence[ScoredSample]) -> float:
    t = eer_threshold(dev_samples)
    far = apcer(test_samples, t, per_type=False)
    frr = bpcer(test_samples, t)
    return (far + frr) / 2.0


# --------------------------------------------------------------------------- #
# Reports and protocols
# --------------------------------------------------------------------------- #


@dataclass
class FoldResult:
    attack_type: str
    threshold: float
    apcer: float
    bpcer: float
    acer: float


@dataclass
class EvalReport:
    protocol: str
    folds: list[FoldResult] = field(default_factory=list)
    mean: float = float("nan")
    std: float = float("nan")
    hter: float | None = None
    notes: list[str] = field(default_factory=list)

    def finalize(self) -> "EvalReport":
        if self.folds:
            vals = np.array([f.acer for f in self.folds])
            self.mean, self.std = float(vals.mean()), float(vals.std())
        return self

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "folds": [asdict(f) for f in self.folds],
            "mean": self.mean,
            "std": self.std,
            "hter": self.hter,
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            obj["protocol"],
            [FoldResult(**f) for f in obj.get("folds", [])],
            obj.get("mean", float("nan")),
            obj.get("std", float("nan")),
            obj.get("hter"),
            list(obj.get("notes", [])),
        )

    def to_csv(self) -> str:
        """One row of per-fold ACERs followed by ``Mean±Std``."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["Method"] + [f.attack_type for f in self.folds] + ["Mean±Std"])
        writer.writerow(
            [self.protocol] + [f"{f.acer:.1f}" for f in self.folds] + [f"{self.mean:.1f}±{self.std:.1f}"]
        )
        return buf.getvalue()


PER_SAMPLE_NOTE = "metrics are computed per sample (not per video)"


def _split(samples: Sequence[ScoredSample], name: str) -> list[ScoredSample]:
    return [s for s in samples if s.split == name]


def run_intra_protocol(samples: Sequence[ScoredSample], target_bpcer: float = 1.0) -> EvalReport:
    """Threshold at ``target_bpcer`` on the dev split, metrics on the test split."""
    dev, test = _split(samples, "dev"), _split(samples, "test")
    t = threshold_at_bpcer(dev, target_bpcer)
    a, b = apcer(test, t), bpcer(test, t)
    report = EvalReport("intra", [FoldResult("all", t, a, b, (a + b) / 2.0)], notes=[PER_SAMPLE_NOTE])
    return report.finalize()


def run_cross_protocol(dev_samples: Sequence[ScoredSample], test_samples: Sequence[ScoredSample]) -> EvalReport:
    t = eer_threshold(dev_samples)
    a, b = apcer(test_samples, t, per_type=False), bpcer(test_samples, t)
    report = EvalReport("cross", [FoldResult("all", t, a, b, (a + b) / 2.0)], hter=(a + b) / 2.0, notes=[PER_SAMPLE_NOTE])
    return report.finalize()


FoldScores = Union[Sequence[ScoredSample], Callable[[str], Sequence[ScoredSample]]]


def run_loo_protocol(dataset: FoldScores, attack_types: Sequence[str], target_bpcer: float = 1.0) -> EvalReport:
    """Leave-one-attack-out evaluation.

    ``dataset`` is either a fixed list of scored samples or a callable that,
    given the held-out type, returns samples scored by a model trained
    without it. For each fold the threshold is set at ``target_bpcer`` on the
    bona fide dev samples and the held-out attacks plus test bona fides are
    scored.
    """
    types = list(dict.fromkeys(attack_types))
    if len(types) < 2:
        raise ValidationError("leave-one-out needs at least two attack types")
    report = EvalReport("loo", notes=[PER_SAMPLE_NOTE])
    for held in types:
        samples = dataset(held) if callable(dataset) else dataset
        dev = [s for s in _split(samples, "dev") if not s.is_attack]
        test = [s for s in _split(samples, "test") if not s.is_attack or s.attack_type == held]
        if not any(s.is_attack for s in test):
            raise ValidationError(f"attack type {held!r} has no test samples")
        t = threshold_at_bpcer(dev, target_bpcer)
        a, b = apcer(test, t), bpcer(test, t)
        report.folds.append(FoldResult(held, t, a, b, (a + b) / 2.0))
    return report.finalize()
