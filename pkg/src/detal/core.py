"""Shared domain types and segment algebra.

Segments are inclusive integer snippet intervals; every ratio here is counted
in snippets, never seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

# length-T real vector: one CAM column, actionness, attention, or an evaluation sequence
ScoreSequence = np.ndarray


@dataclass(frozen=True, order=True)
class Segment:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid segment [{self.start}, {self.end}]")

    def __len__(self) -> int:
        return self.end - self.start + 1

    def __contains__(self, t) -> bool:
        return self.start <= t <= self.end

    def contains(self, other: "Segment") -> bool:
        return self.start <= other.start and other.end <= self.end

    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.end + 1)

    def to_list(self) -> list[int]:
        return [self.start, self.end]


@dataclass(frozen=True)
class Detection:
    segment: Segment
    class_id: int
    confidence: float
    video_id: str = ""


@dataclass(frozen=True)
class SingleFrameAnnotation:
    video_id: str
    t: int
    class_id: int


@dataclass
class Config:
    """Model, mining and training hyperparameters.

    Defaults follow the published THUMOS14 settings (eta, mu, U, optimizer)
    except where only a synthetic-scale value makes sense (dims, epochs).
    """

    eta: float = 0.5
    mu: float = 0.1
    U: int | None = None  # None -> take from the dataset manifest
    T_crop: int = 64
    epsilon_mode: str = "mean"  # "mean" | "zero"
    top_k_divisor: int = 8
    learning_rate: float = 1e-4
    learning_rate_stage2: float | None = 1e-3  # None -> learning_rate
    weight_decay: float = 0.005
    N_c: int = 4
    D: int = 32
    embed_dim: int | None = None  # None -> D // 2
    hidden_dim: int = 16
    seed: int = 0
    N_p: int = 16
    epochs_stage1: int = 50
    epochs_stage2: int = 50
    repeats: int = 1
    init_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.top_k_divisor < 1:
            raise ValueError("top_k_divisor must be >= 1")
        if self.U is not None and self.U < 0:
            raise ValueError("U must be >= 0")
        if self.epsilon_mode not in ("mean", "zero"):
            raise ValueError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if self.learning_rate <= 0 or (self.learning_rate_stage2 is not None and self.learning_rate_stage2 <= 0):
            raise ValueError("learning rates must be positive")
        if self.N_c < 1 or self.D < 1:
            raise ValueError("N_c and D must be positive")
        if min(self.epochs_stage1, self.epochs_stage2, self.N_p) < 0 or self.repeats < 1:
            raise ValueError("epoch counts and N_p must be >= 0, repeats >= 1")

    @property
    def E_dim(self) -> int:
        return self.embed_dim if self.embed_dim is not None else max(1, self.D // 2)

    def lr_for(self, stage: str) -> float:
        if stage.startswith("stage2") and self.learning_rate_stage2 is not None:
            return self.learning_rate_stage2
        return self.learning_rate

    def top_k(self, T: int) -> int:
        return min(T, math.ceil(T / self.top_k_divisor))

    def to_dict(self) -> dict:
        return asdict(self)


def tiou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = len(a) + len(b) - inter
    return inter / union


def relative_threshold(scores, eta: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    # lo + (hi - lo) * eta written as an interpolation so eta = 0 and 1 land
    # exactly on min and max; the clamp guards rounding in between
    return float(min(hi, max(lo, lo * (1.0 - eta) + hi * eta)))


def extract_segments(scores, threshold: float) -> list[Segment]:
    """Maximal runs of consecutive snippets with score >= threshold."""
    mask = np.asarray(scores) >= threshold
    if not mask.any():
        return []
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [Segment(int(s), int(e)) for s, e in zip(starts, ends)]


def median(values) -> float:
    # even count -> mean of the two central values
    return float(np.median(np.asarray(values, dtype=np.float64)))
