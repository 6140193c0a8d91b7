import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY
from xattn.errors import DegenerateBox, MissingGroundTruth, TooFewSamples, UninitializedRunningStats
from xattn.evaluation import (Detection, EvalReport, classification_metrics, infer, iou, localization_metrics,
                              nms, pearson, roc_auc, severity_correlation, spearman)
from xattn.model import RoiSet, init_params
from scipy.stats import rankdata


def brute_nms(boxes, weights, thr):
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    keep = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) < thr for j in keep):
            keep.append(i)
    return keep


def random_boxes(rng, n):
    xy = rng.uniform(0, 80, size=(n, 2))
    wh = rng.uniform(1, 30, size=(n, 2))
    return np.hstack([xy, xy + wh])


# -------------------------------------------------------------------- iou

def test_iou_identical():
    assert iou((0, 0, 2, 3), (0, 0, 2, 3)) == 1.0


def test_iou_disjoint():
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_iou_half_overlap():
    assert abs(iou((0, 0, 10, 10), (5, 0, 15, 10)) - 1 / 3) < 1e-12


def test_iou_degenerate():
    with pytest.raises(DegenerateBox):
        iou((1, 0, 1, 2), (0, 0, 1, 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_symmetric_and_bounded(seed):
    a, b = random_boxes(np.random.default_rng(seed), 2)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == pytest.approx(iou(b, a))


# -------------------------------------------------------------------- nms

def test_nms_single():
    assert nms(np.array([[0, 0, 1, 1]]), np.array([0.3])) == [0]


def test_nms_identical_keeps_heavier():
    assert nms(np.array([[0, 0, 1, 1], [0, 0, 1, 1]]), np.array([0.8, 0.9])) == [1]


def test_nms_disjoint_keeps_both():
    assert nms(np.array([[0, 0, 1, 1], [2, 2, 3, 3]]), np.array([0.9, 0.8])) == [0, 1]


def test_nms_ties_by_index():
    assert nms(np.array([[0, 0, 1, 1], [0, 0, 1, 1]]), np.array([0.5, 0.5])) == [0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_brute_force(seed, n, thr):
    rng = np.random.default_rng(seed)
    boxes, w = random_boxes(rng, n), np.round(rng.uniform(0, 1, n), 2)
    assert nms(boxes, w, thr) == brute_nms(boxes, w, thr)


# ------------------------------------------------------------------ infer

def ready_params():
    p = init_params(TINY, seed=0)
    p.stats_ready = True
    return p


def test_infer_single_roi():
    rs = RoiSet("a", np.ones((1, TINY.roi_dim)), [0.5], [[0.1, 0.1, 0.3, 0.3]])
    det = infer(rs, ready_params())
    assert len(det.boxes) == 1 and det.boxes[0][4] == 1.0 and len(det.attr_probs) == 22


def test_infer_uniform_alpha_returns_boxes_in_index_order():
    # identical ROIs: every alpha equals 1/N; NMS then keeps index 0 first
    box = [0.1, 0.1, 0.3, 0.3]
    rs = RoiSet("a", np.ones((3, TINY.roi_dim)), [0.5] * 3, [box] * 3)
    det = infer(rs, ready_params())
    assert det.boxes == [[*box, pytest.approx(1 / 3)]]


def test_infer_boxes_sorted_and_above_uniform():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 0.6, size=(8, 2))
    rs = RoiSet("a", rng.standard_normal((8, TINY.roi_dim)), rng.uniform(0, 1, 8),
                np.hstack([xy, xy + 0.2]))
    det = infer(rs, ready_params())
    w = [b[4] for b in det.boxes]
    assert w == sorted(w, reverse=True) and all(x >= 1 / 8 for x in w) and sum(w) <= 1 + 1e-12


def test_infer_needs_running_stats():
    rs = RoiSet("a", np.ones((1, TINY.roi_dim)), [0.5], [[0.1, 0.1, 0.3, 0.3]])
    with pytest.raises(UninitializedRunningStats):
        infer(rs, init_params(TINY))


def test_detection_json_round_trip():
    d = Detection("x", [[0.1, 0.2, 0.3, 0.4, 0.5]], [0.25] * 22)
    assert Detection.from_dict(json.loads(d.to_json())) == d


# ----------------------------------------------------------- localization

def det(image_id, *boxes):
    return Detection(image_id, [list(b) + [1.0] for b in boxes], [0.5] * 22)


def test_perfect_localization():
    gt = {"a": [[0, 0, 1, 1]], "b": [[1, 1, 2, 3]]}
    dets = [det(k, v[0]) for k, v in gt.items()]
    assert localization_metrics(dets, gt) == {0.25: 1.0, 0.5: 1.0, 0.75: 1.0}


def test_no_hits():
    gt = {"a": [[0, 0, 1, 1]]}
    assert localization_metrics([det("a", (5, 5, 6, 6))], gt) == {0.25: 0.0, 0.5: 0.0, 0.75: 0.0}


def test_three_image_fixture():
    # IoUs 0.8, 0.4 and 0.3 against the unit-height box [0, 10]
    gt = {k: [[0, 0, 10, 1]] for k in "abc"}
    dets = [det("a", (0, 0, 8, 1)), det("b", (0, 0, 4, 1)), det("c", (0, 0, 3, 1))]
    rates = localization_metrics(dets, gt)
    assert rates[0.25] == 1.0 and rates[0.5] == pytest.approx(1 / 3) and rates[0.75] == pytest.approx(1 / 3)


def test_hit_mode_any():
    gt = {"a": [[0, 0, 1, 1]]}
    d = det("a", (5, 5, 6, 6), (0, 0, 1, 1))
    assert localization_metrics([d], gt, hit_mode="top1")[0.5] == 0.0
    assert localization_metrics([d], gt, hit_mode="any")[0.5] == 1.0


def test_missing_ground_truth():
    with pytest.raises(MissingGroundTruth):
        localization_metrics([det("zz", (0, 0, 1, 1))], {"a": [[0, 0, 1, 1]]})


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_hit_rate_monotone_in_threshold(seed, n):
    rng = np.random.default_rng(seed)
    gt = {f"i{k}": random_boxes(rng, 2).tolist() for k in range(n)}
    dets = [det(k, *random_boxes(rng, 3)) for k in gt]
    ts = sorted(rng.uniform(0.01, 0.99, 5))
    for mode in ("top1", "any"):
        rates = localization_metrics(dets, gt, ts, mode)
        vals = [rates[t] for t in ts]
        assert all(a >= b for a, b in zip(vals, vals[1:])) and all(0 <= v <= 1 for v in vals)


# --------------------------------------------------------- classification

def test_perfect_classification():
    t = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]])
    acc, auc = classification_metrics(t, t)
    assert acc == 1.0 and auc == 1.0


def test_inverted_classification():
    t = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]])
    acc, auc = classification_metrics(1 - t, t)
    assert acc == 0.0 and auc == 0.0


def test_auc_fixture():
    assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_ties_count_half():
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5


def test_single_class_attributes_are_skipped():
    res = classification_metrics([[0.9, 0.2], [0.1, 0.3]], [[1, 0], [0, 0]])
    assert res.skipped == [1] and res.auc == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_matches_pairwise_count(seed):
    rng = np.random.default_rng(seed)
    s = np.round(rng.uniform(0, 1, 15), 1)
    y = np.r_[1, 0, rng.integers(0, 2, 13)]
    pos, neg = s[y == 1], s[y == 0]
    want = np.mean([(p > q) + 0.5 * (p == q) for p in pos for q in neg])
    assert roc_auc(s, y) == pytest.approx(want)


# --------------------------------------------------------------- severity

def test_pearson_fixture():
    assert abs(pearson([1, 2, 3], [1, 3, 2]) - 0.5) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_spearman_is_pearson_of_ranks(seed):
    rng = np.random.default_rng(seed)
    x, y = np.round(rng.standard_normal((2, 20)), 1)
    assert spearman(x, y) == pytest.approx(pearson(rankdata(x), rankdata(y)), abs=1e-12)


def test_linear_severity_is_perfect():
    sev = np.arange(40) % 9
    res = severity_correlation({"severe": 0.02 + 0.1 * sev / 8}, sev)["severe"]
    for f in res.per_fold:
        assert f["pearson"] == pytest.approx(1.0) and f["spearman"] == pytest.approx(1.0)
        assert f["r2"] == pytest.approx(1.0) and f["mae"] < 1e-9 and f["mse"] < 1e-12


def test_inverse_severity():
    sev = np.arange(40) % 9
    res = severity_correlation({"mild": 0.9 - 0.05 * sev}, sev)["mild"]
    assert res.mean["pearson"] == pytest.approx(-1.0) and res.mean["spearman"] == pytest.approx(-1.0)


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        severity_correlation({"a": [0.1, 0.2]}, [1, 2], folds=5)


def test_report_rendering():
    sev = np.arange(20) % 9
    rep = EvalReport({0.25: 0.5, 0.5: 0.25, 0.75: 0.0}, 0.9, 0.8,
                     severity_stats=severity_correlation({"severe": sev / 8.0}, sev))
    text = rep.table()
    assert "IoU@0.5" in text and "Pearson CC" in text and "severe" in text
    d = json.loads(rep.to_json())
    assert d["iou_hit_rate"]["0.5"] == 0.25 and math.isclose(d["severity_stats"]["severe"]["mean"]["pearson"], 1.0)
