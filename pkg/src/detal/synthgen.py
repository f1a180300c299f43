"""Deterministic two-stream synthetic benchmark with planted action instances.

Each stream has its own unit-norm class prototypes plus a few shared
directions: "motion", "background" and a class-agnostic "generic" one.
Instances alternate discriminative phases (prototype plus motion) with weak
phases that lean towards the generic and background directions and carry
little motion, so a classifier trained near the annotated snippet sees
incomplete actions. Short motion-only margins sit around every instance.
Plain background points away from motion; hard-background clutter resembles
a prototype and fools the CAM while staying separable in feature space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .core import Segment, SingleFrameAnnotation
from .formats import write_features, read_features, write_jsonl, read_jsonl


@dataclass
class SynthConfig:
    num_videos: int = 20
    num_test_videos: int = 10
    N_c: int = 4
    T_range: tuple[int, int] = (160, 220)
    D: int = 32
    instances_per_video_range: tuple[int, int] = (3, 6)
    duration_range: tuple[int, int] = (8, 16)
    intra_action_variety: float = 0.9
    hard_bg_rate: float = 0.6
    noise_sigma: float = 0.04
    motion_strength: float = 1.5
    context_margin: int = 3
    bg_spread: float = 0.02
    phase_len: int = 4
    weak_class_share: float = 0.3  # class-specific share of the weak-phase direction
    weak_motion: float = 0.3  # motion carried by weak phases, relative to discriminative ones
    weak_bg_share: float = 0.5  # how much weak phases lean towards the background direction
    hard_bg_similarity: float = 0.9
    hard_bg_motion: float = 0.0  # clutter motion relative to actions (plain background sits at -1)
    annotation_mode: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        self.T_range = tuple(self.T_range)
        self.instances_per_video_range = tuple(self.instances_per_video_range)
        self.duration_range = tuple(self.duration_range)
        lo, hi = self.duration_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad duration_range {self.duration_range}")
        if self.T_range[0] < 1 or self.T_range[1] < self.T_range[0]:
            raise ValueError(f"bad T_range {self.T_range}")
        if self.instances_per_video_range[1] < self.instances_per_video_range[0] or self.instances_per_video_range[0] < 0:
            raise ValueError(f"bad instances_per_video_range {self.instances_per_video_range}")
        if not 0.0 <= self.hard_bg_rate <= 1.0:
            raise ValueError("hard_bg_rate must lie in [0, 1]")
        if min(self.noise_sigma, self.intra_action_variety, self.weak_class_share, self.weak_motion) < 0:
            raise ValueError("noise_sigma, intra_action_variety, weak_class_share and weak_motion must be >= 0")
        if not 0.0 <= self.weak_bg_share <= 1.0:
            raise ValueError("weak_bg_share must lie in [0, 1]")
        if self.annotation_mode not in ("uniform", "center_biased"):
            raise ValueError(f"unknown annotation_mode {self.annotation_mode!r}")
        # worst case must still pack: max instances of max duration, gaps between
        n, d = self.instances_per_video_range[1], hi
        need = n * d + (n + 1) * self.min_gap
        if need > self.T_range[0]:
            raise ValueError(
                f"cannot pack {n} instances of {d} snippets with gap {self.min_gap} into T={self.T_range[0]}")

    @property
    def min_gap(self) -> int:
        return 2 * self.context_margin + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("T_range", "instances_per_video_range", "duration_range"):
            d[k] = list(d[k])
        return d


@dataclass
class Video:
    video_id: str
    rgb: np.ndarray
    flow: np.ndarray
    gt: list[tuple[Segment, int]]
    split: str = "train"

    @property
    def T(self) -> int:
        return self.rgb.shape[0]


@dataclass
class SynthDataset:
    videos: list[Video]
    annotations: list[SingleFrameAnnotation]
    N_c: int
    D: int
    U: int
    prototypes: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    missing: list[tuple[str, str]] = field(default_factory=list)

    def split(self, name: str) -> list[Video]:
        return [v for v in self.videos if v.split == name]

    def annotations_for(self, video_id: str) -> list[SingleFrameAnnotation]:
        return [a for a in self.annotations if a.video_id == video_id]

    def video(self, video_id: str) -> Video:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)


def sample_single_frame(gt: Segment, mode: str, rng: np.random.Generator) -> int:
    if len(gt) == 1:
        return gt.start
    if mode == "uniform":
        return int(rng.integers(gt.start, gt.end + 1))
    if mode == "center_biased":
        idx = gt.indices()
        # triangular weights peaked at the midpoint, symmetric by construction
        w = np.minimum(idx - gt.start, gt.end - idx).astype(np.float64) + 1.0
        return int(rng.choice(idx, p=w / w.sum()))
    raise ValueError(f"unknown sampling mode {mode!r}")


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-12)


def _place_instances(rng, T, n, durations, min_gap):
    """Random non-overlapping placement with at least min_gap free snippets between/around."""
    free = T - sum(durations) - (n + 1) * min_gap
    # random composition of the free slack into n + 1 gaps
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    slack = np.diff(np.concatenate(([0], cuts, [free])))
    segs, pos = [], 0
    for i, d in enumerate(durations):
        pos += min_gap + int(slack[i])
        segs.append(Segment(pos, pos + d - 1))
        pos += d
    return segs


def _phase_mask(rng, L: int, phase_len: int) -> np.ndarray:
    """True on discriminative phases. Phases of ~phase_len snippets alternate
    between discriminative and weak, starting at random; at least one is
    discriminative."""
    mask = np.zeros(L, dtype=bool)
    strong = bool(rng.integers(2))
    pos = 0
    while pos < L:
        n = int(rng.integers(max(1, phase_len - 1), phase_len + 2))
        mask[pos:pos + n] = strong
        strong = not strong
        pos += n
    if not mask.any():
        mask[L // 2] = True
    return mask


def _stream_features(rng, cfg: SynthConfig, T, gt, clutter, dirs):
    D = cfg.D
    protos, motion, bg_dir, generic = dirs["protos"], dirs["motion"], dirs["bg"], dirs["generic"]
    m_s = cfg.motion_strength
    x = bg_dir[None, :] - m_s * motion[None, :] + rng.normal(0.0, cfg.bg_spread, size=(T, D))
    v = cfg.intra_action_variety
    for seg, c in gt:
        # weak phases: a secondary class direction blended with one shared by every class
        drift = _unit(cfg.weak_class_share * dirs["secondary"][c] + (1.0 - cfg.weak_bg_share) * generic
                      + cfg.weak_bg_share * bg_dir + 0.5 * _unit(rng.normal(size=D)))
        strong = _phase_mask(rng, len(seg), cfg.phase_len)
        for t, is_strong in zip(seg.indices(), strong):
            if is_strong:
                x[t] = protos[c] + m_s * motion
            else:
                x[t] = (1.0 - v) * protos[c] + v * drift + cfg.weak_motion * m_s * motion
        m = cfg.context_margin
        for t in list(range(seg.start - m, seg.start)) + list(range(seg.end + 1, seg.end + 1 + m)):
            if 0 <= t < T:
                x[t] = m_s * motion + rng.normal(size=D) * cfg.bg_spread
    s = cfg.hard_bg_similarity
    for seg, c in clutter:
        for t in seg.indices():
            x[t] = s * protos[c] + (1.0 - s) * bg_dir + cfg.hard_bg_motion * m_s * motion + 0.3 * _unit(rng.normal(size=D))
    x = x + rng.normal(0.0, cfg.noise_sigma, size=(T, D))
    return _unit(x).astype(np.float32)


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    D = cfg.D
    dirs = {}
    for stream in ("rgb", "flow"):
        dirs[stream] = {"protos": _unit(rng.normal(size=(cfg.N_c, D))), "motion": _unit(rng.normal(size=D)),
                        "bg": _unit(rng.normal(size=D)), "generic": _unit(rng.normal(size=D)),
                        "secondary": _unit(rng.normal(size=(cfg.N_c, D)))}

    videos, annotations = [], []
    total = cfg.num_videos + cfg.num_test_videos
    for i in range(total):
        split = "train" if i < cfg.num_videos else "test"
        vid = f"{split}_{i:04d}"
        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        n = int(rng.integers(cfg.instances_per_video_range[0], cfg.instances_per_video_range[1] + 1))
        durations = [int(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1)) for _ in range(n)]
        segs = _place_instances(rng, T, n, durations, cfg.min_gap)
        classes = [int(rng.integers(0, cfg.N_c)) for _ in range(n)]
        gt = list(zip(segs, classes))

        # clutter lives in the middle of background gaps, clear of the motion margins
        clutter = []
        bounds = [-1] + [b for s in segs for b in (s.start, s.end)] + [T]
        m = cfg.context_margin
        for k in range(0, len(bounds), 2):
            lo, hi = bounds[k] + 1 + m + 1, bounds[k + 1] - 1 - m - 1
            room = hi - lo + 1
            if room < cfg.duration_range[0] or not classes:
                continue
            if rng.random() >= cfg.hard_bg_rate:
                continue
            L = int(rng.integers(cfg.duration_range[0], min(room, cfg.duration_range[1]) + 1))
            s = int(rng.integers(lo, hi - L + 2))
            clutter.append((Segment(s, s + L - 1), classes[int(rng.integers(0, len(classes)))]))

        feats = {
            stream: _stream_features(rng, cfg, T, gt, clutter, dirs[stream])
            for stream in ("rgb", "flow")
        }
        videos.append(Video(vid, feats["rgb"], feats["flow"], gt, split))
        for seg, c in gt:
            annotations.append(SingleFrameAnnotation(vid, sample_single_frame(seg, cfg.annotation_mode, rng), c))

    train_durs = [len(s) for v in videos if v.split == "train" for s, _ in v.gt]
    mean_dur = float(np.mean(train_durs)) if train_durs else 0.0
    U = int(math.ceil(mean_dur / 2.0))
    return SynthDataset(videos, annotations, cfg.N_c, D, U,
                        prototypes={k: dirs[k]["protos"] for k in dirs})


def save_dataset(ds: SynthDataset, root) -> Path:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in ds.videos:
        paths = {}
        for stream in ("rgb", "flow"):
            rel = f"features/{v.video_id}_{stream}.bin"
            write_features(root / rel, getattr(v, stream))
            paths[stream] = rel
        entries.append({
            "id": v.video_id, "T": v.T, "D": ds.D, "split": v.split, "paths": paths,
            "gt": [[s.start, s.end, c] for s, c in v.gt],
        })
    manifest = {"version": 1, "N_c": ds.N_c, "D": ds.D, "U": ds.U, "videos": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    write_jsonl(root / "annotations.jsonl",
                [{"video_id": a.video_id, "t": a.t, "class_id": a.class_id} for a in ds.annotations])
    return root


class DataError(Exception):
    pass


def load_dataset(root, strict: bool = True) -> SynthDataset:
    """Read a dataset directory. With strict=False, videos whose feature files
    are missing or unreadable are skipped and recorded in ``ds.missing``."""
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read manifest in {root}: {e}") from e
    videos, missing = [], []
    for e in manifest["videos"]:
        try:
            rgb = read_features(root / e["paths"]["rgb"])
            flow = read_features(root / e["paths"]["flow"])
        except (OSError, ValueError) as err:
            if strict:
                raise DataError(f"video {e['id']}: {err}") from err
            missing.append((e["id"], str(err)))
            continue
        if rgb.shape != flow.shape or rgb.shape != (e["T"], e["D"]):
            raise DataError(f"video {e['id']}: feature shape mismatch")
        gt = [(Segment(s, t), c) for s, t, c in e["gt"]]
        videos.append(Video(e["id"], rgb, flow, gt, e.get("split", "train")))
    ann_path = root / "annotations.jsonl"
    anns = []
    if ann_path.exists():
        anns = [SingleFrameAnnotation(r["video_id"], int(r["t"]), int(r["class_id"])) for r in read_jsonl(ann_path)]
    return SynthDataset(videos, anns, manifest["N_c"], manifest["D"], manifest["U"], missing=missing)
