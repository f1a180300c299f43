"""Two-stage training: coarse classifier on expanded single frames, then
Dilation-Erosion mining and retraining on the mined pool."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Config, SingleFrameAnnotation
from .deminer import Ablation, MiningResult, mine, pool_record
from .evaluation import THUMOS_AVG, THUMOS_THRESHOLDS, EvalReport, detect, evaluate, gt_triples
from .formats import config_hash, write_checkpoint, write_jsonl
from .model import (LOSS_TERMS, PARTS, AdamW, Batch, NumericalError, TrainingLabels, forward_all,
                    init_params, train_step)
from .synthgen import SynthDataset, Video

log = logging.getLogger(__name__)


@dataclass
class VideoPool:
    """Supervision for one video: labels per part plus provenance."""

    labels: dict[str, TrainingLabels]
    provenance: str  # "stage-1" | "mined"
    epoch: int = 0


@dataclass
class TrainingPool:
    videos: dict[str, VideoPool] = field(default_factory=dict)
    provenance: str = "stage-1"

    def sizes(self) -> dict[str, int]:
        act = sum(len(p.labels["rgb"].action_index_set()) for p in self.videos.values())
        bg = sum(len(p.labels["rgb"].background) for p in self.videos.values())
        return {"action_snippets": act, "background_snippets": bg}


# ---------------------------------------------------------------- label construction

def stage1_labels(annotations, T: int, U: int, rng: np.random.Generator) -> TrainingLabels:
    """Each annotated snippet plus u neighbours on each side, u ~ U{0..U}; no backgrounds."""
    if U < 0:
        raise ValueError("U must be >= 0")
    actions = []
    for a in annotations:
        u = int(rng.integers(0, U + 1))
        lo, hi = max(0, a.t - u), min(T - 1, a.t + u)
        actions.append((np.arange(lo, hi + 1), a.class_id))
    return TrainingLabels(actions=actions)


def stage1_pool(dataset: SynthDataset, videos, U: int, rng, epoch: int = 0) -> TrainingPool:
    pool = TrainingPool(provenance="stage-1")
    for v in videos:
        lab = stage1_labels(dataset.annotations_for(v.video_id), v.T, U, rng)
        pool.videos[v.video_id] = VideoPool({p: lab for p in PARTS}, "stage-1", epoch)
    return pool


def labels_from_mining(res: MiningResult) -> TrainingLabels:
    actions = [(s.indices(), c) for s, c in res.refined]
    act = {int(i) for idx, _ in actions for i in idx}
    bg = {i for s in res.hard_bg for i in range(s.start, s.end + 1)} | set(res.evident_bg)
    return TrainingLabels(actions=actions, background=np.array(sorted(bg - act), dtype=np.int64),
                          evident=np.array(sorted(set(res.evident_bg) - act), dtype=np.int64))


def fused_labels(rgb: MiningResult, flow: MiningResult) -> TrainingLabels:
    """Per-annotation union of the two streams' refined segments; backgrounds
    from either stream, minus anything labelled as action."""
    actions = []
    for (sa, ca), (sb, cb) in zip(rgb.refined, flow.refined):
        lo, hi = min(sa.start, sb.start), max(sa.end, sb.end)
        actions.append((np.arange(lo, hi + 1), ca))
    act = {int(i) for idx, _ in actions for i in idx}
    bg, ev = set(), set()
    for r in (rgb, flow):
        bg |= {i for s in r.hard_bg for i in range(s.start, s.end + 1)} | set(r.evident_bg)
        ev |= set(r.evident_bg)
    return TrainingLabels(actions=actions, background=np.array(sorted(bg - act), dtype=np.int64),
                          evident=np.array(sorted(ev - act), dtype=np.int64))


def mined_pool(results: dict[str, dict[str, MiningResult]], epoch: int = 0) -> TrainingPool:
    pool = TrainingPool(provenance="mined")
    for vid, res in results.items():
        labels = {"rgb": labels_from_mining(res["rgb"]), "flow": labels_from_mining(res["flow"]),
                  "fused": fused_labels(res["rgb"], res["flow"])}
        pool.videos[vid] = VideoPool(labels, "mined", epoch)
    return pool


def sample_pairs(labels: TrainingLabels, n_pairs: int, rng, use_background: bool = True) -> np.ndarray:
    """Snippet pairs for the embedding loss, balanced 1:1 same/different when possible.

    Action snippets come from the instances; the background side of
    different-class pairs comes from the evident backgrounds only.
    """
    if not labels.actions or n_pairs <= 0:
        return np.zeros((0, 3), dtype=np.int64)
    idx = np.concatenate([i for i, _ in labels.actions])
    cls = np.concatenate([np.full(len(i), c) for i, c in labels.actions])
    if len(idx) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    bg = labels.evident if use_background else np.zeros(0, dtype=np.int64)
    by_class = {c: idx[cls == c] for c in np.unique(cls)}
    can_same = any(len(v) > 1 for v in by_class.values())
    can_diff = len(bg) > 0 or len(by_class) > 1

    pairs = []
    for n in range(n_pairs):
        want_same = (n % 2 == 0) if (can_same and can_diff) else can_same
        if not (can_same or can_diff):
            break
        if want_same:
            c = rng.choice([c for c, v in by_class.items() if len(v) > 1])
            i, j = rng.choice(by_class[c], size=2, replace=False)
            pairs.append((i, j, 1))
        else:
            k = int(rng.integers(len(idx)))
            i, c = idx[k], cls[k]
            others = np.concatenate([idx[cls != c], bg])
            pairs.append((i, int(rng.choice(others)), 0))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 3)


def crop_labels(labels: TrainingLabels, lo: int, hi: int) -> TrainingLabels:
    """Restrict labels to snippets [lo, hi) and shift them to crop coordinates."""
    actions = []
    for idx, c in labels.actions:
        keep = idx[(idx >= lo) & (idx < hi)] - lo
        if len(keep):
            actions.append((keep, c))
    bg, ev = labels.background, labels.evident
    return TrainingLabels(actions=actions, background=bg[(bg >= lo) & (bg < hi)] - lo,
                          evident=ev[(ev >= lo) & (ev < hi)] - lo)


def video_label(labels: TrainingLabels, N_c: int) -> np.ndarray:
    y = np.zeros(N_c)
    for _, c in labels.actions:
        y[c] = 1.0
    return y


def make_batch(video: Video, vpool: VideoPool, cfg: Config, rng, crop: bool, use_bg_pairs: bool) -> Batch:
    T = video.T
    lo, hi = 0, T
    if crop and T > cfg.T_crop:
        lo = int(rng.integers(0, T - cfg.T_crop + 1))
        hi = lo + cfg.T_crop
    labels = {}
    for part in PARTS:
        lab = vpool.labels[part]
        if (lo, hi) != (0, T):
            lab = crop_labels(lab, lo, hi)
        lab = TrainingLabels(lab.actions, lab.background,
                             sample_pairs(lab, cfg.N_p, rng, use_background=use_bg_pairs), lab.evident)
        labels[part] = lab
    y = video_label(labels["rgb"], cfg.N_c)
    return Batch(video.rgb[lo:hi], video.flow[lo:hi], y, labels)


# ---------------------------------------------------------------- training loop

@dataclass
class StageReport:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    pool_sizes: dict[str, int] = field(default_factory=dict)


def _epoch_pool(stage: str, dataset, videos, U, rng, epoch, mined):
    if stage == "stage1":
        return stage1_pool(dataset, videos, U, rng, epoch)
    return mined


def train_stage(params, dataset: SynthDataset, videos, cfg: Config, epochs: int, stage: str,
                rng: np.random.Generator, U: int, pool: TrainingPool | None = None,
                step0: int = 0) -> tuple[dict, StageReport, int]:
    opt = AdamW(cfg.lr_for(stage), cfg.weight_decay)
    report = StageReport(stage)
    step = step0
    for epoch in range(epochs):
        # stage-1 expansion width is redrawn every epoch
        epoch_pool = _epoch_pool(stage, dataset, videos, U, rng, epoch, pool)
        order = rng.permutation(len(videos))
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        sums["total"] = 0.0
        for vi in order:
            v = videos[vi]
            batch = make_batch(v, epoch_pool.videos[v.video_id], cfg, rng, crop=bool(step % 2),
                               use_bg_pairs=stage != "stage1")
            try:
                params, opt, br = train_step(batch, params, opt, cfg.mu)
            except NumericalError as e:
                raise NumericalError(f"{stage} epoch {epoch} video {v.video_id}: {e}") from e
            for t in LOSS_TERMS:
                sums[t] += sum(br[f"{p}.{t}"] for p in PARTS)
            sums["total"] += br["total"]
            step += 1
        n = max(1, len(videos))
        row = {"stage": stage, "epoch": epoch, **{k: v / n for k, v in sums.items()}, **epoch_pool.sizes()}
        report.epochs.append(row)
        log.debug("%s epoch %d total %.4f", stage, epoch, row["total"])
    report.pool_sizes = (pool or stage1_pool(dataset, videos, U, np.random.default_rng(0))).sizes()
    return params, report, step


def mine_dataset(params, dataset: SynthDataset, videos, cfg: Config, ablation: Ablation):
    results = {}
    for v in videos:
        outs = forward_all(v.rgb, v.flow, params)
        res = mine(v, {"rgb": outs["rgb"], "flow": outs["flow"]}, dataset.annotations_for(v.video_id),
                   cfg, ablation)
        results[v.video_id] = res
    return results


@dataclass
class RunResult:
    params: dict
    stage1_params: dict
    reports: list[StageReport]
    mining: dict[str, dict[str, MiningResult]]
    step: int


def _rngs(cfg: Config):
    root = np.random.SeedSequence(cfg.seed)
    return [np.random.default_rng(s) for s in root.spawn(3)]


def run_stage1(dataset: SynthDataset, cfg: Config, out_dir=None) -> RunResult:
    videos = dataset.split("train")
    if not videos:
        raise ValueError("dataset has no training videos")
    U = cfg.U if cfg.U is not None else dataset.U
    init_rng, s1_rng, _ = _rngs(cfg)
    params = init_params(cfg, init_rng)
    params, rep1, step = train_stage(params, dataset, videos, cfg, cfg.epochs_stage1, "stage1", s1_rng, U)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "stage1.ckpt", params, cfg, step, "stage1")
    return RunResult(params, dict(params), [rep1], {}, step)


def run_stage2(stage1: RunResult, dataset: SynthDataset, cfg: Config, ablation: Ablation = Ablation(),
               out_dir=None) -> RunResult:
    """Mine with the stage-1 model and keep training on the mined pool.

    NoDE (or zero stage-2 epochs) returns the stage-1 parameters unchanged.
    """
    videos = dataset.split("train")
    U = cfg.U if cfg.U is not None else dataset.U
    _, _, s2_rng = _rngs(cfg)
    params, step = dict(stage1.params), stage1.step
    reports = list(stage1.reports)
    out = Path(out_dir) if out_dir else None
    mining = {}
    if not ablation.no_de and cfg.epochs_stage2 > 0:
        for r in range(cfg.repeats):
            mining = mine_dataset(params, dataset, videos, cfg, ablation)
            pool = mined_pool(mining, epoch=r)
            if out:
                write_jsonl(out / f"pool_{r}.jsonl", [pool_record(v, mining[v]) for v in sorted(mining)])
            params, rep, step = train_stage(params, dataset, videos, cfg, cfg.epochs_stage2, f"stage2.{r}",
                                            s2_rng, U, pool=pool, step0=step)
            reports.append(rep)
            if out:
                save_checkpoint(out / f"stage2_{r}.ckpt", params, cfg, step, f"stage2.{r}")
    if out:
        save_checkpoint(out / "final.ckpt", params, cfg, step, "final")
        write_reports(out, reports, cfg, ablation)
    return RunResult(params, stage1.stage1_params, reports, mining, step)


def run_two_stage(dataset: SynthDataset, cfg: Config, ablation: Ablation = Ablation(),
                  out_dir=None) -> RunResult:
    return run_stage2(run_stage1(dataset, cfg, out_dir), dataset, cfg, ablation, out_dir)


def save_checkpoint(path, params, cfg: Config, step: int, stage: str) -> None:
    write_checkpoint(path, params, {"config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()),
                                    "step": step, "stage": stage})


def write_reports(out: Path, reports: list[StageReport], cfg: Config, ablation: Ablation,
                  extra: dict | None = None) -> None:
    rows = [r for rep in reports for r in rep.epochs]
    if rows:
        with open(out / "epochs.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    summary = {
        "config": cfg.to_dict(), "ablation": vars(ablation), "variant": ablation.name(),
        "stages": [{"stage": r.stage, "epochs": len(r.epochs), "pool": r.pool_sizes,
                    "final_total": r.epochs[-1]["total"] if r.epochs else None} for r in reports],
    }
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))


# ---------------------------------------------------------------- inference

def infer(params, videos, cfg: Config, best_only: bool = False):
    dets = []
    for v in videos:
        outs = forward_all(v.rgb, v.flow, params)
        dets.extend(detect(outs["fused"], cfg, v.video_id, best_only=best_only))
    return dets


def map_report(params, videos, cfg: Config, thresholds=THUMOS_THRESHOLDS, average_range=THUMOS_AVG,
               best_only: bool = False, missing=()) -> EvalReport:
    dets = infer(params, videos, cfg, best_only)
    return evaluate(dets, gt_triples(videos), thresholds, average_range, missing)


ABLATIONS = {
    "full": Ablation(),
    "NoDE": Ablation(no_de=True),
    "NoDilation": Ablation(no_dilation=True),
    "NoErosion": Ablation(no_erosion=True),
    "NoHCS": Ablation(no_hcs=True),
    "NoBG": Ablation(no_bg=True),
    "NoEB": Ablation(no_eb=True),
    "NoHB": Ablation(no_hb=True),
}


def run_ablation_suite(dataset: SynthDataset, cfg: Config, names=tuple(ABLATIONS), iou: float = 0.5) -> dict:
    """mAP@iou on the test split for each named variant.

    Stage 1 ignores every ablation switch, so all variants share one stage-1 run.
    """
    test = dataset.split("test")
    s1 = run_stage1(dataset, cfg)
    results = {}
    for name in names:
        params = run_stage2(s1, dataset, cfg, ABLATIONS[name]).params
        rep = map_report(params, test, cfg, thresholds=(iou,), average_range=())
        results[name] = rep.map_at[round(iou, 4)]
    return results
