import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clfusion.metrics import (
    THRESHOLDS,
    average_precision,
    error_stats,
    evaluate,
    interpolated_ap,
    match_predictions,
    scale_error,
    yaw_error,
)
from clfusion.scene import ObjectList, ObjectRecord, SceneGenConfig, sample_random_scene


def rec(x, y, conf=1.0, cls=0, size=(4.0, 2.0, 1.5), yaw=0.0):
    return ObjectRecord((x, y, 0.0), size, yaw, (0.0, 0.0), cls, conf)


def test_perfect_match():
    gt = sample_random_scene(SceneGenConfig(), 1).objects
    m = match_predictions(gt, gt, 2.0)
    assert len(m.pairs) == len(gt) and not m.unmatched_preds and not m.unmatched_gt


def test_outside_threshold():
    m = match_predictions(ObjectList((rec(3, 0),)), ObjectList((rec(0, 0),)), 2.0)
    assert m.pairs == () and m.unmatched_preds == (0,) and m.unmatched_gt == (0,)


def test_greedy_by_confidence():
    preds = ObjectList((rec(0.5, 0, conf=0.8), rec(1.0, 0, conf=0.9)))
    m = match_predictions(preds, ObjectList((rec(0, 0),)), 2.0)
    assert [p for p, _, _ in m.pairs] == [1] and m.unmatched_preds == (0,)


def test_class_must_agree():
    m = match_predictions(ObjectList((rec(0, 0, cls=1),)), ObjectList((rec(0, 0, cls=0),)), 2.0)
    assert m.pairs == ()


def test_ap_cases():
    gt = ObjectList((rec(0, 0), rec(10, 10)))
    assert average_precision(gt, gt, 2.0) == 1.0
    assert average_precision(ObjectList(), gt, 2.0) == 0.0
    preds = ObjectList((rec(0, 0, conf=0.9), rec(30, 30, conf=0.8)))
    assert abs(average_precision(preds, gt, 2.0) - 0.5) <= 0.01


def test_absent_class_excluded():
    gt = ObjectList((rec(0, 0, cls=2),))
    assert average_precision(gt, gt, 1.0) == 1.0
    assert math.isnan(average_precision(ObjectList(), ObjectList(), 1.0))


def test_interpolated_ap_edges():
    assert interpolated_ap(np.array([]), np.array([], bool), 0) == 0.0
    assert interpolated_ap(np.array([0.5]), np.array([True]), 1) == 1.0


def test_error_stats():
    p = rec(0, 0)
    assert error_stats([(p, p)]) == {"mATE": 0.0, "mASE": 0.0, "mAOE": 0.0}
    assert scale_error((4, 2, 1.5), (2, 2, 1.5)) == pytest.approx(0.5)
    assert yaw_error(math.pi, -math.pi) == pytest.approx(0.0, abs=1e-12)
    assert error_stats([]) == {"mATE": 1.0, "mASE": 1.0, "mAOE": 1.0}
    s = error_stats([(rec(3, 4, yaw=0.5), rec(0, 0, yaw=-0.5))])
    assert s["mATE"] == pytest.approx(5.0) and s["mAOE"] == pytest.approx(1.0)


def noisy_preds(gt, r, miss=0.2, fps=3):
    out = []
    for g in gt:
        if r.random() < miss:
            continue
        out.append(rec(g.center[0] + r.normal(0, 1), g.center[1] + r.normal(0, 1),
                       conf=float(r.random()), cls=g.class_id, size=g.size, yaw=g.yaw + r.normal(0, 0.2)))
    for _ in range(fps):
        out.append(rec(*r.uniform(-50, 50, 2), conf=float(r.random()), cls=int(r.integers(4))))
    return ObjectList(tuple(out))


@given(st.integers(0, 10_000))
def test_threshold_monotone(seed):
    r = np.random.default_rng(seed)
    gts = [sample_random_scene(SceneGenConfig(), seed * 10 + k).objects for k in range(3)]
    preds = [noisy_preds(g, r) for g in gts]
    aps = [average_precision(preds, gts, t) for t in THRESHOLDS]
    assert all(a <= b + 1e-12 for a, b in zip(aps, aps[1:]))
    assert all(0 <= a <= 1 for a in aps)


@given(st.integers(0, 10_000), st.floats(-20, 20), st.floats(-20, 20))
def test_translation_invariance(seed, dx, dy):
    r = np.random.default_rng(seed)
    gts = [sample_random_scene(SceneGenConfig(), seed).objects]
    preds = [noisy_preds(gts[0], r)]

    def shift(ol):
        return ol.with_records(rec(x.center[0] + dx, x.center[1] + dy, x.confidence, x.class_id, x.size, x.yaw)
                               for x in ol)

    a = evaluate(preds, gts).summary()
    b = evaluate([shift(p) for p in preds], [shift(g) for g in gts]).summary()
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-9)


@given(st.integers(0, 10_000))
def test_adding_confident_hit_never_hurts(seed):
    r = np.random.default_rng(seed)
    gt = sample_random_scene(SceneGenConfig(n_objects=(4, 8)), seed).objects
    g0 = gt[0]
    others = [x for x in noisy_preds(gt, r, miss=0.5) if math.hypot(x.center[0] - g0.center[0],
                                                                  x.center[1] - g0.center[1]) > 4.5]
    base = ObjectList(tuple(x for x in others))
    conf = max([x.confidence for x in others], default=0.0) + 1e-3
    hit = rec(g0.center[0], g0.center[1], conf=min(conf, 1.0), cls=g0.class_id)
    better = ObjectList((hit,) + base.records)
    for t in THRESHOLDS:
        assert average_precision(better, gt, t) >= average_precision(base, gt, t) - 1e-12


def test_desk_score_and_outputs():
    gts = [sample_random_scene(SceneGenConfig(), k).objects for k in range(4)]
    ev = evaluate(gts, gts)
    assert ev.mAP == 1.0 and ev.desk_score == 1.0
    ev = evaluate([ObjectList()] * 4, gts)
    assert ev.mAP == 0.0 and ev.desk_score == 0.0
    r = np.random.default_rng(0)
    ev = evaluate([noisy_preds(g, r) for g in gts], gts)
    assert 0 <= ev.desk_score <= 1
    rows = list(csv.reader(io.StringIO(ev.to_csv())))
    assert rows[0] == ["class", "threshold", "ap"]
    assert len([x for x in rows if x[0] in ("car", "pedestrian", "cyclist", "barrier")]) == 16
    assert ["summary", "all"] == rows[17][:2]
    d = ev.to_dict()
    assert set(d["summary"]) >= {"desk_score", "mAP", "mATE", "mASE", "mAOE", "mAP@2"}
