import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from detal.core import Config, Detection, Segment
from detal.evaluation import ANET_AVG, THUMOS_AVG, average_precision, class_gate, detect, evaluate, mean_ap
from detal.model import ModelOutputs, sigmoid, softmax

from fixtures import (FIVE_SIXTHS_DETS, FIVE_SIXTHS_GT, THREE_VIDEO_AP, THREE_VIDEO_DETS, THREE_VIDEO_GT,
                      THREE_VIDEO_MAP, det)


def fused_from_logits(z, lam=None):
    z = np.asarray(z, dtype=np.float64)
    T = z.shape[0]
    l_ = np.zeros(T) if lam is None else np.asarray(lam, dtype=np.float64)
    return ModelOutputs(np.zeros((T, 2)), sigmoid(np.zeros(T)), softmax(z), sigmoid(l_), z, np.zeros(T), l_)


def test_perfect_and_disjoint_detection():
    gt = [("v", Segment(0, 10), 0)]
    for thr in (0.1, 0.5, 1.0):
        assert average_precision([det("v", 0, 10, 0, 0.9)], gt, thr) == {0: 1.0}
        assert average_precision([det("v", 20, 30, 0, 0.9)], gt, thr) == {0: 0.0}


def test_five_sixths_fixture():
    assert average_precision(FIVE_SIXTHS_DETS, FIVE_SIXTHS_GT, 0.5)[0] == pytest.approx(5 / 6, abs=1e-12)


@pytest.mark.parametrize("thr", sorted(THREE_VIDEO_AP))
def test_three_video_fixture(thr):
    ap = average_precision(THREE_VIDEO_DETS, THREE_VIDEO_GT, thr)
    assert ap == pytest.approx(THREE_VIDEO_AP[thr], abs=1e-12)
    assert mean_ap(THREE_VIDEO_DETS, THREE_VIDEO_GT, thr) == pytest.approx(THREE_VIDEO_MAP[thr], abs=1e-12)


def test_detections_equal_to_gt_score_one():
    dets = [Detection(s, c, 1.0, v) for v, s, c in THREE_VIDEO_GT]
    rep = evaluate(dets, THREE_VIDEO_GT)
    assert all(v == 1.0 for v in rep.map_at.values()) and rep.average == 1.0


def test_no_detections_score_zero():
    rep = evaluate([], THREE_VIDEO_GT)
    assert all(v == 0.0 for v in rep.map_at.values())


def test_classes_without_gt_are_excluded():
    dets = FIVE_SIXTHS_DETS + [det("v", 0, 4, 3, 0.95)]
    assert set(average_precision(dets, FIVE_SIXTHS_GT, 0.5)) == {0}


def test_report_average_ranges_and_dict():
    rep = evaluate(THREE_VIDEO_DETS, THREE_VIDEO_GT, thresholds=(0.5, 0.7), average_range=ANET_AVG,
                   missing=[("x", "gone")])
    d = rep.to_dict()
    assert d["mAP"] == {"0.50": 1.0, "0.70": 0.75}
    assert d["missing"] == [["x", "gone"]]
    assert rep.average == pytest.approx(np.mean([mean_ap(THREE_VIDEO_DETS, THREE_VIDEO_GT, t) for t in ANET_AVG]))
    assert rep.csv_rows()[0] == ["iou_threshold", "mAP"]
    assert math.isnan(evaluate([], THREE_VIDEO_GT, average_range=()).average)
    assert THUMOS_AVG == (0.1, 0.2, 0.3, 0.4, 0.5)


def test_detect_single_plateau():
    z = np.full((10, 3), -5.0)
    z[:, 2] = 0.0
    z[2:6, 0] = 5.0
    dets = detect(fused_from_logits(z), Config(N_c=2))
    assert [(d.segment, d.class_id) for d in dets] == [(Segment(2, 5), 0)]


def test_detect_all_negative_logits():
    z = np.full((10, 3), -1.0)
    assert detect(fused_from_logits(z), Config(N_c=2)) == []


def test_detect_two_plateaus_ordered_by_peak():
    z = np.full((12, 3), -5.0)
    z[:, 2] = 0.0
    z[1:3, 0] = 3.0
    z[6:9, 0] = 5.0
    dets = detect(fused_from_logits(z), Config(N_c=2))
    assert [d.segment for d in dets] == [Segment(6, 8), Segment(1, 2)]
    assert dets[0].confidence > dets[1].confidence
    # confidence = peak Psi + video-level class probability
    from detal.model import video_class_prob
    fused = fused_from_logits(z)
    p = video_class_prob(fused.Psi, fused.Lambda)
    assert dets[0].confidence == pytest.approx(fused.Psi[6:9, 0].max() + p[0])
    best = detect(fused, Config(N_c=2), best_only=True)
    assert [d.segment for d in best] == [Segment(6, 8)]


def test_class_gate_ignores_background_column():
    z = np.array([[1.0, -2.0, 9.0], [-3.0, -1.0, 9.0]])
    assert np.allclose(class_gate(z, 1), [1.0, -1.0])


@st.composite
def detection_sets(draw):
    n_videos = draw(st.integers(1, 3))
    gt, dets = [], []
    for v in range(n_videos):
        for _ in range(draw(st.integers(0, 3))):
            s = draw(st.integers(0, 40))
            gt.append((f"v{v}", Segment(s, s + draw(st.integers(0, 10))), draw(st.integers(0, 2))))
        for _ in range(draw(st.integers(0, 6))):
            s = draw(st.integers(0, 40))
            dets.append(det(f"v{v}", s, s + draw(st.integers(0, 10)), draw(st.integers(0, 2)),
                            draw(st.floats(0.01, 1.0))))
    return dets, gt


@given(detection_sets())
def test_map_monotone_in_threshold(data):
    dets, gt = data
    vals = [mean_ap(dets, gt, t) for t in np.linspace(0.1, 1.0, 10)]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 for v in vals)


@given(detection_sets(), st.randoms(use_true_random=False), st.floats(0.1, 10.0))
def test_ap_invariant_to_order_and_scale(data, rnd, scale):
    dets, gt = data
    dets = list({(d.video_id, d.segment, d.class_id): d for d in dets}.values())
    # distinct confidences so rank order is unambiguous
    dets = [Detection(d.segment, d.class_id, 0.01 + i / 100, d.video_id) for i, d in enumerate(dets)]
    base = average_precision(dets, gt, 0.5)
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    assert average_precision(shuffled, gt, 0.5) == base
    scaled = [Detection(d.segment, d.class_id, d.confidence * scale, d.video_id) for d in dets]
    assert average_precision(scaled, gt, 0.5) == pytest.approx(base, abs=1e-12)
