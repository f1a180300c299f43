"""Finite-difference check of the analytic gradients on small random instances."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import Config
from .model import LOSS_TERMS, PARTS, Batch, TrainingLabels, init_params, loss_and_grad, loss_value

TERMS_AND_TOTAL = LOSS_TERMS + ("total",)


@dataclass
class GradCheckResult:
    instance: int
    term: str
    max_rel_error: float
    worst_tensor: str
    checked: int


@dataclass
class GradCheckReport:
    results: list[GradCheckResult] = field(default_factory=list)
    seconds: float = 0.0
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.results) and self.max_rel_error < self.tol

    def per_term(self) -> dict[str, float]:
        out = {}
        for r in self.results:
            out[r.term] = max(out.get(r.term, 0.0), r.max_rel_error)
        return out


def _random_labels(rng, T, N_c, n_pairs):
    # one or two instances on disjoint runs, a few background snippets, mixed pairs
    n_inst = int(rng.integers(1, 3))
    cuts = np.sort(rng.choice(np.arange(1, T), size=n_inst, replace=False))
    bounds = np.concatenate(([0], cuts, [T]))
    actions, used = [], set()
    for k in range(n_inst):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        L = int(rng.integers(1, max(2, (hi - lo) // 2 + 1)))
        s = int(rng.integers(lo, hi - L + 1))
        idx = np.arange(s, s + L)
        actions.append((idx, int(rng.integers(N_c))))
        used.update(idx.tolist())
    free = np.array([i for i in range(T) if i not in used], dtype=np.int64)
    n_bg = int(rng.integers(0, len(free) + 1)) if len(free) else 0
    bg = np.sort(rng.choice(free, size=n_bg, replace=False)) if n_bg else np.zeros(0, dtype=np.int64)
    pairs = np.stack([rng.integers(0, T, size=n_pairs), rng.integers(0, T, size=n_pairs),
                      rng.integers(0, 2, size=n_pairs)], axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return TrainingLabels(actions=actions, background=bg, pairs=pairs.astype(np.int64))


def random_instance(rng: np.random.Generator, max_T=8, max_D=8, max_classes=3):
    T = int(rng.integers(3, max_T + 1))
    D = int(rng.integers(2, max_D + 1))
    N_c = int(rng.integers(1, max_classes + 1))
    cfg = Config(N_c=N_c, D=D, embed_dim=int(rng.integers(2, 5)), hidden_dim=int(rng.integers(2, 5)),
                 mu=float(rng.uniform(0.05, 1.0)))
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, rng).items()}
    # non-trivial fusion weights so every path carries gradient
    for kind in ("A", "Psi", "Lambda"):
        params[f"fuse.{kind}"] = rng.uniform(0.2, 1.0, size=2)
    for k in params:
        if k.split(".")[-1].startswith("b"):
            params[k] = rng.normal(0.0, 0.3, size=params[k].shape)
    labels = {p: _random_labels(rng, T, N_c, 6) for p in PARTS}
    y = np.zeros(N_c)
    for _, c in labels["rgb"].actions:
        y[c] = 1.0
    batch = Batch(rng.normal(size=(T, D)), rng.normal(size=(T, D)), y, labels)
    return cfg, params, batch


def _coords(shape, rng, max_coords):
    n = int(np.prod(shape))
    if n <= max_coords:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_coords, replace=False))


def check_instance(params, batch, mu, term, rng, h=1e-6, max_coords=24, atol=1e-7):
    """Largest norm-wise relative error over tensors for one loss term ("total" = all terms)."""
    terms = LOSS_TERMS if term == "total" else (term,)

    def f(p):
        return loss_value(p, batch, mu, terms=terms)

    _, _, grads = loss_and_grad(params, batch, mu, terms=terms)
    worst, worst_name, checked = 0.0, "", 0
    for name in sorted(params):
        base = params[name]
        idx = _coords(base.shape, rng, max_coords)
        num = np.empty(len(idx))
        flat = base.reshape(-1)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params)
            flat[i] = orig - h
            down = f(params)
            flat[i] = orig
            num[n] = (up - down) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), atol)
        err = float(np.linalg.norm(ana - num) / denom)
        checked += len(idx)
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name, checked


def run_gradcheck(n_instances=20, seed=0, tol=1e-4, max_coords=24) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    t0 = time.perf_counter()
    for k in range(n_instances):
        cfg, params, batch = random_instance(rng)
        for term in TERMS_AND_TOTAL:
            err, name, n = check_instance(params, batch, cfg.mu, term, rng, max_coords=max_coords)
            report.results.append(GradCheckResult(k, term, err, name, n))
    report.seconds = time.perf_counter() - t0
    return report
