"""Dilation-Erosion pseudo-label mining.

Dilation grows each annotation into an inflated segment from CAM-based
coarse segments and actionness-based auxiliary segments. Erosion trims it
back with Seed Temporal Growing, using a threshold taken from the
high-confidence run around the annotated snippet. Coarse segments that end
up disjoint from every refined segment become hard backgrounds; the top-k
snippets by (-A + b) / 2 become evident backgrounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Segment, SingleFrameAnnotation, extract_segments, median, relative_threshold, tiou
from .formats import POOL_SCHEMA


@dataclass(frozen=True)
class Ablation:
    no_de: bool = False
    no_dilation: bool = False
    no_erosion: bool = False
    no_hcs: bool = False
    no_bg: bool = False
    no_eb: bool = False
    no_hb: bool = False

    @property
    def use_hard_bg(self) -> bool:
        return not (self.no_bg or self.no_hb)

    @property
    def use_evident_bg(self) -> bool:
        return not (self.no_bg or self.no_eb)

    def name(self) -> str:
        on = [k for k, v in vars(self).items() if v]
        return "+".join(on) if on else "full"


@dataclass
class AnnotationTrace:
    t: int
    class_id: int
    coarse: Segment | None
    inflated: Segment
    high_conf: Segment
    refined: Segment
    epsilon: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "t": self.t, "class_id": self.class_id,
            "coarse": self.coarse.to_list() if self.coarse else None,
            "inflated": self.inflated.to_list(), "high_conf": self.high_conf.to_list(),
            "refined": self.refined.to_list(), "epsilon": self.epsilon, "degenerate": self.degenerate,
        }


@dataclass
class MiningResult:
    video_id: str
    T: int
    refined: list[tuple[Segment, int]] = field(default_factory=list)
    hard_bg: list[Segment] = field(default_factory=list)
    evident_bg: list[int] = field(default_factory=list)
    trace: list[AnnotationTrace] = field(default_factory=list)

    @property
    def flagged(self) -> list[AnnotationTrace]:
        return [tr for tr in self.trace if tr.degenerate]

    def to_record(self) -> dict:
        return {
            "T": self.T,
            "refined": [[s.start, s.end, c] for s, c in self.refined],
            "hard_bg": [s.to_list() for s in self.hard_bg],
            "evident_bg": list(self.evident_bg),
            "trace": [tr.to_dict() for tr in self.trace],
        }

    @classmethod
    def from_record(cls, video_id: str, r: dict) -> "MiningResult":
        def seg(x):
            return Segment(*x) if x is not None else None
        trace = [AnnotationTrace(d["t"], d["class_id"], seg(d["coarse"]), seg(d["inflated"]),
                                 seg(d["high_conf"]), seg(d["refined"]), d["epsilon"], d["degenerate"])
                 for d in r.get("trace", [])]
        return cls(video_id, r["T"], [(Segment(s, e), c) for s, e, c in r["refined"]],
                   [Segment(*s) for s in r["hard_bg"]], list(r["evident_bg"]), trace)


# ---------------------------------------------------------------- dilation

def coarse_segments(psi_row, eta: float) -> list[Segment]:
    return extract_segments(psi_row, relative_threshold(psi_row, eta))


def auxiliary_segments(A, eta: float) -> list[Segment]:
    return extract_segments(A, relative_threshold(A, eta))


def _containing(segments, t):
    for s in segments:
        if t in s:
            return s
    return None


def inflated_segment(coarse, auxiliary, ann) -> tuple[Segment, bool]:
    """Covering interval of every coarse/auxiliary segment containing ann.t.

    Returns (segment, degenerate); degenerate is True when nothing contains
    the annotated snippet and the fallback [t, t] is used.
    """
    t = ann.t if isinstance(ann, SingleFrameAnnotation) else int(ann)
    hits = [s for s in list(coarse) + list(auxiliary) if t in s]
    if not hits:
        return Segment(t, t), True
    return Segment(min(s.start for s in hits), max(s.end for s in hits)), False


# ---------------------------------------------------------------- erosion

def corrected_score(psi_row, A) -> np.ndarray:
    psi_row, A = np.asarray(psi_row, dtype=np.float64), np.asarray(A, dtype=np.float64)
    if psi_row.shape != A.shape:
        raise ValueError("CAM column and actionness must have equal length")
    return psi_row + A


def high_confidence_segment(coarse: Segment, corrected, t_label: int) -> Segment:
    corrected = np.asarray(corrected, dtype=np.float64)
    if t_label not in coarse:
        raise ValueError(f"t_label {t_label} outside coarse segment {coarse}")
    thr = median(corrected[coarse.start:coarse.end + 1])
    ok = corrected >= thr
    if not ok[t_label]:
        return Segment(t_label, t_label)
    lo = t_label
    while lo - 1 >= coarse.start and ok[lo - 1]:
        lo -= 1
    hi = t_label
    while hi + 1 <= coarse.end and ok[hi + 1]:
        hi += 1
    return Segment(lo, hi)


def cosine_distance_to(features, t_label: int) -> np.ndarray:
    """1 - cos(x_t, x_label) for every t; rows with zero norm get distance 1."""
    X = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    ref = X[t_label]
    nref = norms[t_label]
    d = np.ones(len(X))
    ok = (norms > 0) & (nref > 0)
    d[ok] = 1.0 - (X[ok] @ ref) / (norms[ok] * nref)
    return d


def stg_evaluate(t: int, t_label: int, corrected, features) -> float:
    if t == t_label:
        raise ValueError("evaluation score is undefined at the labelled snippet")
    X = np.asarray(features, dtype=np.float64)
    xt, xl = X[t], X[t_label]
    nt, nl = np.linalg.norm(xt), np.linalg.norm(xl)
    d = 1.0 if nt == 0 or nl == 0 else 1.0 - float(xt @ xl) / (nt * nl)
    return float(corrected[t] * math.exp(-d))


def evaluation_sequence(corrected, features, t_label: int) -> np.ndarray:
    F = np.asarray(corrected, dtype=np.float64) * np.exp(-cosine_distance_to(features, t_label))
    F[t_label] = np.nan  # outside the evaluation function's domain
    return F


def stg_threshold(F, high_conf: Segment, t_label: int, fallback=()) -> float:
    """Median of F over the high-confidence run, the labelled snippet excluded.

    A run of just the labelled snippet has no scores; the segments in
    ``fallback`` (a Segment or a sequence, e.g. coarse then inflated) are
    tried in order instead.
    """
    if isinstance(fallback, Segment):
        fallback = (fallback,)
    vals = [F[i] for i in high_conf.indices() if i != t_label]
    for seg in fallback:
        if vals:
            break
        if seg is not None:
            vals = [F[i] for i in seg.indices() if i != t_label]
    if not vals:
        return math.inf
    return median(vals)


def stg_scan(F, inflated: Segment, t_label: int, eps: float) -> Segment:
    """Grow from the labelled snippet in both directions, keeping the
    outermost snippet on each side whose score clears eps."""
    first = t_label
    for i in range(t_label - 1, inflated.start - 1, -1):
        if F[i] >= eps:
            first = i
    last = t_label
    for i in range(t_label + 1, inflated.end + 1):
        if F[i] >= eps:
            last = i
    return Segment(first, last)


def stg(inflated: Segment, high_conf: Segment, t_label: int, corrected, features) -> Segment:
    F = evaluation_sequence(corrected, features, t_label)
    eps = stg_threshold(F, high_conf, t_label, fallback=inflated)
    return stg_scan(F, inflated, t_label, eps)


# ---------------------------------------------------------------- backgrounds

def hard_backgrounds(coarse_all, refined_all) -> list[Segment]:
    out = []
    for p in coarse_all:
        if all(tiou(p, r) == 0.0 for r in refined_all) and p not in out:
            out.append(p)
    return sorted(out)


def background_score(A, psi_bg) -> np.ndarray:
    return (-np.asarray(A, dtype=np.float64) + np.asarray(psi_bg, dtype=np.float64)) / 2.0


def evident_backgrounds(A, psi_bg, k: int, exclude=None) -> list[int]:
    """Indices of the k largest background scores, ties to the lower index.

    Snippets flagged in ``exclude`` rank after every other snippet, so they
    are picked only when fewer than k unflagged snippets exist; the pool
    drops them again where they overlap an action.
    """
    b = background_score(A, psi_bg)
    if k > len(b):
        raise ValueError(f"k={k} exceeds sequence length {len(b)}")
    flagged = np.zeros(len(b), dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool)
    # lexsort: primary key flagged, then -b; stable, so ties keep the lower index first
    order = np.lexsort((-b, flagged))
    return sorted(int(i) for i in order[:k])


# ---------------------------------------------------------------- end to end

def _resolve_overlaps(refined: list[tuple[Segment, int, int]]) -> list[tuple[Segment, int, int]]:
    """Truncate overlapping refined segments at the midpoint of their overlap,
    never cutting away either annotation's own snippet."""
    items = sorted(refined, key=lambda r: (r[2], r[0].start))
    segs = [[s.start, s.end] for s, _, _ in items]
    for i in range(len(items) - 1):
        a, b = segs[i], segs[i + 1]
        if a[1] >= b[0]:
            ta, tb = items[i][2], items[i + 1][2]
            mid = (b[0] + a[1]) // 2
            mid = min(max(mid, ta), tb - 1) if ta < tb else ta
            a[1] = mid
            b[0] = mid + 1 if ta < tb else b[0]
    out = []
    for (s, c, t), (lo, hi) in zip(items, segs):
        lo, hi = min(lo, t), max(hi, t)
        out.append((Segment(lo, hi), c, t))
    return out


def mine_stream(video_id: str, features, psi, A, annotations, cfg, ablation: Ablation = Ablation()) -> MiningResult:
    """Mine one stream's outputs for one video."""
    psi = np.asarray(psi, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    T = psi.shape[0]
    aux = auxiliary_segments(A, cfg.eta)
    coarse_by_class = {}
    traces, refined = [], []
    for ann in annotations:
        c = ann.class_id
        if c not in coarse_by_class:
            coarse_by_class[c] = coarse_segments(psi[:, c], cfg.eta)
        coarse_list = coarse_by_class[c]
        coarse = _containing(coarse_list, ann.t)
        corrected = corrected_score(psi[:, c], A)

        if ablation.no_dilation:
            inflated, degenerate = (coarse, False) if coarse else (Segment(ann.t, ann.t), True)
        else:
            inflated, degenerate = inflated_segment(coarse_list, aux, ann)

        if coarse is None:
            hc = Segment(ann.t, ann.t)
        elif ablation.no_hcs:
            hc = coarse
        else:
            hc = high_confidence_segment(coarse, corrected, ann.t)
        # the seed threshold is only meaningful inside the region that gets scanned
        hc = Segment(max(hc.start, inflated.start), min(hc.end, inflated.end))

        F = evaluation_sequence(corrected, features, ann.t)
        eps = stg_threshold(F, hc, ann.t, fallback=(coarse, inflated))
        if ablation.no_erosion:
            ref = coarse if coarse is not None else Segment(ann.t, ann.t)
        else:
            ref = stg_scan(F, inflated, ann.t, eps)
        traces.append(AnnotationTrace(ann.t, c, coarse, inflated, hc, ref, float(eps), degenerate))
        refined.append((ref, c, ann.t))

    refined = _resolve_overlaps(refined)
    ref_segs = [s for s, _, _ in refined]
    # keep the trace in sync with post-truncation segments
    by_t = {t: s for s, _, t in refined}
    for tr in traces:
        tr.refined = by_t[tr.t] if tr.t in by_t else tr.refined

    coarse_all = [s for segs in coarse_by_class.values() for s in segs]
    hard = hard_backgrounds(coarse_all, ref_segs) if ablation.use_hard_bg else []
    evident = []
    if ablation.use_evident_bg:
        k = cfg.top_k(T)
        covered = np.zeros(T, dtype=bool)
        for s in ref_segs:
            covered[s.start:s.end + 1] = True
        evident = evident_backgrounds(A, psi[:, -1], k, exclude=covered)
    return MiningResult(video_id, T, [(s, c) for s, c, _ in refined], hard, evident, traces)


def mine(video, outputs_per_stream, annotations, cfg, ablation: Ablation = Ablation()) -> dict[str, MiningResult]:
    """Mine every stream of one video; ``outputs_per_stream`` maps stream -> ModelOutputs."""
    res = {}
    for stream, out in outputs_per_stream.items():
        feats = getattr(video, stream)
        res[stream] = mine_stream(video.video_id, feats, out.Psi, out.A, annotations, cfg, ablation)
    return res


def pool_record(video_id: str, results: dict[str, MiningResult]) -> dict:
    return {"schema": POOL_SCHEMA, "video_id": video_id,
            "streams": {k: r.to_record() for k, r in sorted(results.items())}}


def results_from_record(rec: dict) -> dict[str, MiningResult]:
    if rec.get("schema") != POOL_SCHEMA:
        raise ValueError(f"unsupported pool schema {rec.get('schema')!r}")
    return {k: MiningResult.from_record(rec["video_id"], r) for k, r in rec["streams"].items()}
