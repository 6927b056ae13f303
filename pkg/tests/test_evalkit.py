import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgfas.core import ValidationError
from fgfas.evalkit import (
    EvalReport,
    ScoredSample,
    UndefinedMetricError,
    acer,
    apcer,
    apcer_by_type,
    bpcer,
    eer_threshold,
    hter,
    run_cross_protocol,
    run_intra_protocol,
    run_loo_protocol,
    threshold_at_bpcer,
    threshold_sweep,
)


def att(score, kind="print", split="test"):
    return ScoredSample(score, "attack", kind, split)


def bona(score, split="test"):
    return ScoredSample(score, "bona_fide", None, split)


def test_apcer_counts():
    assert apcer([att(0.9), att(0.2)], 0.5) == 50.0
    assert apcer([att(0.9), att(0.7)], 0.5) == 0.0


def test_apcer_is_worst_type():
    s = [att(0.9, "print"), att(0.1, "replay"), att(0.8, "replay")]
    assert apcer_by_type(s, 0.5) == {"print": 0.0, "replay": 50.0}
    assert apcer(s, 0.5) == 50.0
    assert apcer(s, 0.5, per_type=False) == pytest.approx(100 / 3)


def test_acer_definition():
    s = [att(0.9)] * 9 + [att(0.1)] + [bona(0.1)] * 49 + [bona(0.9)]
    assert apcer(s, 0.5) == pytest.approx(10.0)
    assert bpcer(s, 0.5) == pytest.approx(2.0)
    assert acer(s, 0.5) == pytest.approx(6.0)


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        apcer([bona(0.1)], 0.5)
    with pytest.raises(UndefinedMetricError):
        bpcer([att(0.1)], 0.5)
    with pytest.raises(ValidationError):
        ScoredSample(0.1, "spoof", "print")
    with pytest.raises(ValidationError):
        ScoredSample(float("nan"), "attack", "print")


def test_sweep_acer_identity():
    rng = np.random.default_rng(0)
    s = [att(v, k) for v, k in zip(rng.normal(1, 1, 40), rng.choice(["a", "b"], 40))] + [bona(v) for v in rng.normal(0, 1, 40)]
    for row in threshold_sweep(s):
        assert row["acer"] == (row["apcer"] + row["bpcer"]) / 2


def test_threshold_at_bpcer_200():
    scores = np.random.default_rng(3).normal(size=200)
    s = [bona(v, "dev") for v in scores]
    t = threshold_at_bpcer(s, 1.0)
    assert int((scores > t).sum()) <= 2
    # sort-and-index oracle: third-largest score
    assert t == sorted(scores)[-3]


def test_threshold_extremes():
    s = [bona(v) for v in (0.3, 0.1, 0.7)]
    assert threshold_at_bpcer(s, 100.0) == 0.1
    assert threshold_at_bpcer(s, 0.0) >= 0.7


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=300), st.floats(0, 100))
def test_threshold_never_exceeds_target(scores, target):
    s = [bona(v) for v in scores]
    assert bpcer(s, threshold_at_bpcer(s, target)) <= target + 1e-9


def test_hter_symmetric_fixture():
    s = [bona(v) for v in (0.1, 0.2, 0.3, 0.6)] + [att(v) for v in (0.5, 0.7, 0.8, 0.9)]
    # exhaustive sweep oracle: FAR and FRR both 1/4 inside [0.5, 0.6)
    t = eer_threshold(s)
    assert 0.5 <= t < 0.6
    assert hter(s, s) == 25.0


def test_hter_perfect_and_shuffled():
    dev = [bona(v) for v in (0.1, 0.2)] + [att(v) for v in (0.8, 0.9)]
    test = [bona(v) for v in (0.0, 0.3)] + [att(v) for v in (0.7, 1.0)]
    assert hter(dev, test) == 0.0
    rng = np.random.default_rng(0)
    scores = rng.random(2000)
    labels = rng.permutation(np.repeat([0, 1], 1000))
    mixed = [att(v) if y else bona(v) for v, y in zip(scores, labels)]
    assert abs(hter(mixed[:1000], mixed[1000:]) - 50.0) <= 5.0


def test_intra_protocol_uses_dev_threshold():
    s = [bona(v, "dev") for v in np.linspace(0, 0.4, 100)] + [att(0.9, split="dev")]
    s += [bona(0.2), bona(0.45), att(0.5), att(0.3)]
    rep = run_intra_protocol(s, 1.0)
    (fold,) = rep.folds
    assert fold.threshold == pytest.approx(np.linspace(0, 0.4, 100)[-2])
    assert fold.bpcer == 50.0 and fold.apcer == 50.0
    assert rep.mean == fold.acer


def test_cross_protocol_emits_hter():
    dev = [bona(0.1, "dev"), att(0.9, split="dev")]
    rep = run_cross_protocol(dev, [bona(0.2), att(0.8)])
    assert rep.hter == 0.0


def make_loo(sep=True):
    s = [bona(v, "dev") for v in np.linspace(0, 0.2, 10)] + [bona(v) for v in np.linspace(0, 0.2, 10)]
    for kind, v in (("print", 0.9), ("glasses", 0.15)):
        s += [att(v if not sep else 0.9, kind)] * 4
    return s


def test_loo_separable_is_zero():
    rep = run_loo_protocol(make_loo(), ["print", "glasses"])
    assert [f.acer for f in rep.folds] == [0.0, 0.0]


def test_loo_mean_std_recomputed():
    rep = run_loo_protocol(make_loo(sep=False), ["print", "glasses"])
    vals = [f.acer for f in rep.folds]
    assert rep.mean == pytest.approx(sum(vals) / 2, abs=1e-9)
    assert rep.std == pytest.approx(abs(vals[0] - vals[1]) / 2, abs=1e-9)
    back = EvalReport.from_json(json.loads(json.dumps(rep.to_json())))
    assert back.to_json() == rep.to_json()
    assert rep.to_csv().splitlines()[0] == "Method,print,glasses,Mean±Std"


def test_loo_needs_two_types():
    with pytest.raises(ValidationError):
        run_loo_protocol(make_loo(), ["print"])
