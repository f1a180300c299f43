"""Detection generation from fused outputs and mAP at temporal IoU thresholds."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .core import Detection, Segment, extract_segments, tiou
from .model import ModelOutputs, video_class_prob

THUMOS_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
THUMOS_AVG = (0.1, 0.2, 0.3, 0.4, 0.5)
ANET_AVG = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def class_gate(psi_logits, k: int) -> np.ndarray:
    """Mean of the top-k logits over time per action class (background column excluded)."""
    z = np.asarray(psi_logits, dtype=np.float64)[:, :-1]
    k = max(1, min(k, z.shape[0]))
    top = -np.sort(-z, axis=0)[:k]
    return top.mean(axis=0)


def detect(fused: ModelOutputs, cfg, video_id: str = "", best_only: bool = False) -> list[Detection]:
    T = fused.T
    gate = class_gate(fused.PsiLogits, cfg.top_k(T))
    p = video_class_prob(fused.Psi, fused.Lambda)
    dets = []
    for c in np.flatnonzero(gate > 0):
        col = fused.Psi[:, c]
        eps = float(col.mean()) if cfg.epsilon_mode == "mean" else 0.0
        cls_dets = [
            Detection(seg, int(c), float(col[seg.start:seg.end + 1].max() + p[c]), video_id)
            for seg in extract_segments(col, eps)
        ]
        if best_only and cls_dets:
            cls_dets = [max(cls_dets, key=lambda d: d.confidence)]
        dets.extend(cls_dets)
    return sorted(dets, key=lambda d: (-d.confidence, d.class_id, d.segment.start))


def _exact_ap(detections, gt, iou_thr: float) -> dict[int, Fraction]:
    """Per-class AP with greedy matching; ``gt`` is a list of (video_id, Segment, class_id).

    Non-interpolated: AP = sum over true-positive ranks of precision@rank / n_gt.
    Kept as exact rationals so means round once. Classes without ground truth
    are omitted.
    """
    gt_by = defaultdict(list)
    n_gt = defaultdict(int)
    for vid, seg, c in gt:
        gt_by[(vid, c)].append(seg)
        n_gt[c] += 1
    dets_by_class = defaultdict(list)
    for d in detections:
        dets_by_class[d.class_id].append(d)

    ap = {}
    for c in sorted(n_gt):
        # stable sort: equal confidences keep input order after a canonical pre-sort
        dets = sorted(dets_by_class.get(c, []), key=lambda d: (d.video_id, d.segment.start, d.segment.end))
        dets.sort(key=lambda d: -d.confidence)
        used = {key: [False] * len(v) for key, v in gt_by.items() if key[1] == c}
        tp, total = 0, Fraction(0)
        for rank, d in enumerate(dets, start=1):
            cands = gt_by.get((d.video_id, c), [])
            best, best_iou = -1, -1.0
            for j, g in enumerate(cands):
                if used[(d.video_id, c)][j]:
                    continue
                o = tiou(d.segment, g)
                if o >= iou_thr and o > best_iou:
                    best, best_iou = j, o
            if best >= 0:
                used[(d.video_id, c)][best] = True
                tp += 1
                total += Fraction(tp, rank)
        ap[c] = total / n_gt[c]
    return ap


def _exact_mean(ap: dict[int, Fraction]) -> float:
    return float(sum(ap.values()) / len(ap)) if ap else 0.0


def average_precision(detections, gt, iou_thr: float) -> dict[int, float]:
    return {c: float(v) for c, v in _exact_ap(detections, gt, iou_thr).items()}


def mean_ap(detections, gt, iou_thr: float) -> float:
    return _exact_mean(_exact_ap(detections, gt, iou_thr))


@dataclass
class EvalReport:
    thresholds: list[float]
    map_at: dict[float, float]
    ap_per_class: dict[float, dict[int, float]]
    average: float
    average_range: list[float]
    detections: list[Detection] = field(default_factory=list, repr=False)
    missing: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "mAP": {f"{t:.2f}": self.map_at[t] for t in self.thresholds},
            "AP_per_class": {f"{t:.2f}": {str(c): v for c, v in self.ap_per_class[t].items()}
                             for t in self.thresholds},
            "average_mAP": self.average,
            "average_range": self.average_range,
            "num_detections": len(self.detections),
            "missing": [list(m) for m in self.missing],
        }

    def csv_rows(self) -> list[list]:
        rows = [["iou_threshold", "mAP"]]
        rows += [[f"{t:.2f}", f"{self.map_at[t]:.6f}"] for t in self.thresholds]
        rows.append(["avg", f"{self.average:.6f}"])
        return rows


def evaluate(detections, gt, thresholds=THUMOS_THRESHOLDS, average_range=THUMOS_AVG, missing=()) -> EvalReport:
    ths = sorted(set(round(t, 4) for t in list(thresholds) + list(average_range)))
    exact = {t: _exact_ap(detections, gt, t) for t in ths}
    ap = {t: {c: float(v) for c, v in e.items()} for t, e in exact.items()}
    m = {t: _exact_mean(e) for t, e in exact.items()}
    avg = float(np.mean([m[round(t, 4)] for t in average_range])) if average_range else math.nan
    keep = [round(t, 4) for t in thresholds]
    return EvalReport(keep, {t: m[t] for t in keep}, {t: ap[t] for t in keep}, avg,
                      list(average_range), list(detections), list(missing))


def gt_triples(videos) -> list[tuple[str, Segment, int]]:
    return [(v.video_id, s, c) for v in videos for s, c in v.gt]
