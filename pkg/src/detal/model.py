"""Two-stream snippet classification model with hand-written backprop.

Each stream maps features X (T x D) through a width-3 temporal convolution
to an embedding E, then three heads read E:

    actionness  conv3 -> tanh -> conv3 -> tanh -> affine -> sigmoid    A
    CAM         affine -> tanh -> affine -> tanh -> affine -> softmax  Psi
    attention   conv3 -> tanh -> conv3 -> sigmoid                      Lambda

Fusion mixes the two streams' pre-normalisation scores with learned scalars
and renormalises. Everything is computed in float64; parameters are stored
as float32 so checkpoints round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Config

STREAMS = ("rgb", "flow")
PARTS = ("rgb", "flow", "fused")
LOSS_TERMS = ("cls_video", "cls_snippet", "action", "emb")
LOG_CLAMP = 1e-7
_NORM_EPS = 1e-12


class NumericalError(FloatingPointError):
    """A loss term or gradient became non-finite."""


# ---------------------------------------------------------------- parameters

def init_params(cfg: Config, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, De, H, C = cfg.D, cfg.E_dim, cfg.hidden_dim, cfg.N_c + 1
    shapes = {
        "emb.W": (3, D, De), "emb.b": (De,),
        "act.W1": (3, De, H), "act.b1": (H,),
        "act.W2": (3, H, H), "act.b2": (H,),
        "act.W3": (H, 1), "act.b3": (1,),
        "cam.W1": (De, H), "cam.b1": (H,),
        "cam.W2": (H, H), "cam.b2": (H,),
        "cam.W3": (H, C), "cam.b3": (C,),
        "att.W1": (3, De, H), "att.b1": (H,),
        "att.W2": (3, H, 1), "att.b2": (1,),
    }
    params = {}
    for stream in STREAMS:
        for name, shape in shapes.items():
            if name.split(".")[1].startswith("b"):
                w = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                w = rng.normal(0.0, cfg.init_scale / np.sqrt(fan_in), size=shape)
            params[f"{stream}.{name}"] = w.astype(np.float32)
    for kind in ("A", "Psi", "Lambda"):
        params[f"fuse.{kind}"] = np.array([0.5, 0.5], dtype=np.float32)
    return params


def check_finite(params: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"parameter {k} is not finite")


# ---------------------------------------------------------------- primitives

def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _cols3(x):
    T = x.shape[0]
    xp = np.pad(x, ((1, 1), (0, 0)))
    return np.concatenate([xp[0:T], xp[1:T + 1], xp[2:T + 2]], axis=1)


def conv3(x, W, b):
    """Width-3 temporal convolution with zero padding; W is (3, Din, Dout)."""
    cols = _cols3(x)
    return cols @ W.reshape(-1, W.shape[2]) + b, cols


def conv3_backward(dy, cols, W):
    Din = W.shape[1]
    dW = (cols.T @ dy).reshape(W.shape)
    db = dy.sum(axis=0)
    dcols = dy @ W.reshape(-1, W.shape[2]).T
    T = dy.shape[0]
    dxp = np.zeros((T + 2, Din))
    for k in range(3):
        dxp[k:k + T] += dcols[:, k * Din:(k + 1) * Din]
    return dxp[1:T + 1], dW, db


# ---------------------------------------------------------------- forward

@dataclass
class ModelOutputs:
    E: np.ndarray
    A: np.ndarray
    Psi: np.ndarray
    Lambda: np.ndarray
    PsiLogits: np.ndarray
    A_logits: np.ndarray
    Lambda_logits: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def T(self) -> int:
        return self.Psi.shape[0]


def _p(params, stream, name):
    return np.asarray(params[f"{stream}.{name}"], dtype=np.float64)


def forward(features, params, stream: str) -> ModelOutputs:
    X = np.asarray(features, dtype=np.float64)
    W = _p(params, stream, "emb.W")
    if X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ValueError(f"{stream}: features {X.shape} do not match embedding input width {W.shape[1]}")
    c = {}
    pre_e, c["emb.cols"] = conv3(X, W, _p(params, stream, "emb.b"))
    E = np.tanh(pre_e)

    h1_pre, c["act.cols1"] = conv3(E, _p(params, stream, "act.W1"), _p(params, stream, "act.b1"))
    h1 = np.tanh(h1_pre)
    h2_pre, c["act.cols2"] = conv3(h1, _p(params, stream, "act.W2"), _p(params, stream, "act.b2"))
    h2 = np.tanh(h2_pre)
    a_logits = (h2 @ _p(params, stream, "act.W3") + _p(params, stream, "act.b3"))[:, 0]

    g1 = np.tanh(E @ _p(params, stream, "cam.W1") + _p(params, stream, "cam.b1"))
    g2 = np.tanh(g1 @ _p(params, stream, "cam.W2") + _p(params, stream, "cam.b2"))
    psi_logits = g2 @ _p(params, stream, "cam.W3") + _p(params, stream, "cam.b3")

    k1_pre, c["att.cols1"] = conv3(E, _p(params, stream, "att.W1"), _p(params, stream, "att.b1"))
    k1 = np.tanh(k1_pre)
    l_pre, c["att.cols2"] = conv3(k1, _p(params, stream, "att.W2"), _p(params, stream, "att.b2"))
    l_logits = l_pre[:, 0]

    c.update(X=X, E=E, h1=h1, h2=h2, g1=g1, g2=g2, k1=k1)
    return ModelOutputs(E, sigmoid(a_logits), softmax(psi_logits), sigmoid(l_logits),
                        psi_logits, a_logits, l_logits, c)


def fuse(out_rgb: ModelOutputs, out_flow: ModelOutputs, params) -> ModelOutputs:
    if out_rgb.T != out_flow.T:
        raise ValueError(f"stream lengths differ: {out_rgb.T} vs {out_flow.T}")
    wA, wP, wL = (np.asarray(params[f"fuse.{k}"], dtype=np.float64) for k in ("A", "Psi", "Lambda"))
    a = wA[0] * out_rgb.A_logits + wA[1] * out_flow.A_logits
    z = wP[0] * out_rgb.PsiLogits + wP[1] * out_flow.PsiLogits
    l_ = wL[0] * out_rgb.Lambda_logits + wL[1] * out_flow.Lambda_logits
    E = np.concatenate([out_rgb.E, out_flow.E], axis=1)
    return ModelOutputs(E, sigmoid(a), softmax(z), sigmoid(l_), z, a, l_)


def forward_all(rgb, flow, params) -> dict[str, ModelOutputs]:
    o_rgb = forward(rgb, params, "rgb")
    o_flow = forward(flow, params, "flow")
    return {"rgb": o_rgb, "flow": o_flow, "fused": fuse(o_rgb, o_flow, params)}


# ---------------------------------------------------------------- labels & losses

@dataclass
class TrainingLabels:
    """Snippet supervision for one video (or crop).

    ``actions`` holds one (indices, class_id) entry per annotated instance so
    the per-instance means can be formed; ``pairs`` rows are (i, j, same_class).
    ``evident`` is the subset of ``background`` that may serve as the
    background side of embedding pairs.
    """

    actions: list[tuple[np.ndarray, int]] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    evident: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def action_index_set(self) -> set[int]:
        return {int(i) for idx, _ in self.actions for i in idx}

    def validate(self, T: int) -> None:
        act = self.action_index_set()
        bg = {int(i) for i in self.background}
        if act & bg:
            raise ValueError(f"snippets labelled both action and background: {sorted(act & bg)[:5]}")
        for i in act | bg:
            if not 0 <= i < T:
                raise ValueError(f"label index {i} outside [0, {T})")


def video_class_prob(Psi, Lambda):
    """Softmax over action classes of the attention-weighted CAM sum; background dropped."""
    Psi = np.asarray(Psi, dtype=np.float64)
    n_c = Psi.shape[1] - 1 if Psi.shape[1] > 1 else 1
    z = np.asarray(Lambda, dtype=np.float64) @ Psi[:, :n_c]
    return softmax(z)


def _clog(x):
    return np.log(np.clip(x, LOG_CLAMP, 1.0))


def _dclog(x):
    # derivative of log(clip(x)); zero where the clamp is active
    return np.where((x >= LOG_CLAMP) & (x <= 1.0), 1.0 / np.maximum(x, LOG_CLAMP), 0.0)


def loss_video(p, y) -> float:
    return float(-np.sum(np.asarray(y) * _clog(np.asarray(p))))


def loss_snippet(Psi, labels: TrainingLabels, mu: float) -> float:
    total = 0.0
    for idx, c in labels.actions:
        if len(idx):
            total += float(np.mean(-_clog(Psi[idx, c])))
    if len(labels.background):
        total += mu * float(np.mean(-_clog(Psi[labels.background, -1])))
    return total


def loss_action(A, labels: TrainingLabels, mu: float) -> float:
    total = 0.0
    for idx, _ in labels.actions:
        if len(idx):
            total += float(np.mean(-_clog(A[idx])))
    if len(labels.background):
        total += mu * float(np.mean(-_clog(1.0 - A[labels.background])))
    return total


def _pair_distance(E, pairs):
    Ei, Ej = E[pairs[:, 0]], E[pairs[:, 1]]
    ni = np.sqrt((Ei * Ei).sum(1) + _NORM_EPS)
    nj = np.sqrt((Ej * Ej).sum(1) + _NORM_EPS)
    cos = (Ei * Ej).sum(1) / (ni * nj)
    return 1.0 - cos, (Ei, Ej, ni, nj, cos)


def loss_embed(E, pairs) -> float:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    if len(pairs) == 0:
        return 0.0
    d, _ = _pair_distance(np.asarray(E, dtype=np.float64), pairs)
    sim = np.exp(-d)
    same = pairs[:, 2].astype(bool)
    per = np.where(same, -_clog(sim), -_clog(1.0 - sim))
    return float(per.mean())


def _loss_and_output_grads(out: ModelOutputs, y, labels: TrainingLabels, mu, terms):
    """Loss terms for one part and their gradients w.r.t. the part's
    pre-normalisation scores and embedding."""
    T, C = out.Psi.shape
    Psi, A, Lam = out.Psi, out.A, out.Lambda
    dPsi = np.zeros((T, C))
    dA = np.zeros(T)
    dLam = np.zeros(T)
    dE = np.zeros_like(out.E)
    vals = dict.fromkeys(LOSS_TERMS, 0.0)

    if "cls_video" in terms and np.any(y):
        n_c = C - 1
        z = Lam @ Psi[:, :n_c]
        p = softmax(z)
        vals["cls_video"] = loss_video(p, y)
        gp = -np.asarray(y, dtype=np.float64) * _dclog(p)
        dz = p * (gp - np.dot(gp, p))
        dLam += Psi[:, :n_c] @ dz
        dPsi[:, :n_c] += np.outer(Lam, dz)

    if "cls_snippet" in terms:
        vals["cls_snippet"] = loss_snippet(Psi, labels, mu)
        for idx, c in labels.actions:
            if len(idx):
                np.add.at(dPsi, (idx, c), -_dclog(Psi[idx, c]) / len(idx))
        bg = labels.background
        if len(bg):
            np.add.at(dPsi, (bg, C - 1), -mu * _dclog(Psi[bg, C - 1]) / len(bg))

    if "action" in terms:
        vals["action"] = loss_action(A, labels, mu)
        for idx, _ in labels.actions:
            if len(idx):
                np.add.at(dA, idx, -_dclog(A[idx]) / len(idx))
        bg = labels.background
        if len(bg):
            np.add.at(dA, bg, mu * _dclog(1.0 - A[bg]) / len(bg))

    pairs = labels.pairs
    if "emb" in terms and len(pairs):
        vals["emb"] = loss_embed(out.E, pairs)
        d, (Ei, Ej, ni, nj, cos) = _pair_distance(out.E, pairs)
        sim = np.exp(-d)
        same = pairs[:, 2].astype(bool)
        # dL/dd per pair: same -> d/dd[-log e^-d] = 1 (through the clamp); diff -> -sim/(1 - sim)
        dd = np.where(same, sim * _dclog(sim), -sim * _dclog(1.0 - sim)) / len(pairs)
        dcos = -dd
        gi = dcos[:, None] * (Ej / (ni * nj)[:, None] - cos[:, None] * Ei / (ni * ni)[:, None])
        gj = dcos[:, None] * (Ei / (ni * nj)[:, None] - cos[:, None] * Ej / (nj * nj)[:, None])
        np.add.at(dE, pairs[:, 0], gi)
        np.add.at(dE, pairs[:, 1], gj)

    # back through the normalisations
    dZ = Psi * (dPsi - (dPsi * Psi).sum(axis=1, keepdims=True))
    da = dA * A * (1.0 - A)
    dl = dLam * Lam * (1.0 - Lam)
    return vals, {"PsiLogits": dZ, "A_logits": da, "Lambda_logits": dl, "E": dE}


def _stream_backward(params, stream, out: ModelOutputs, g, grads):
    c = out.cache
    P = lambda n: _p(params, stream, n)  # noqa: E731
    key = lambda n: f"{stream}.{n}"  # noqa: E731
    dE = g["E"].copy()

    # CAM head
    dz = g["PsiLogits"]
    grads[key("cam.W3")] += c["g2"].T @ dz
    grads[key("cam.b3")] += dz.sum(0)
    dg2 = (dz @ P("cam.W3").T) * (1.0 - c["g2"] ** 2)
    grads[key("cam.W2")] += c["g1"].T @ dg2
    grads[key("cam.b2")] += dg2.sum(0)
    dg1 = (dg2 @ P("cam.W2").T) * (1.0 - c["g1"] ** 2)
    grads[key("cam.W1")] += c["E"].T @ dg1
    grads[key("cam.b1")] += dg1.sum(0)
    dE += dg1 @ P("cam.W1").T

    # actionness head
    da = g["A_logits"][:, None]
    grads[key("act.W3")] += c["h2"].T @ da
    grads[key("act.b3")] += da.sum(0)
    dh2 = (da @ P("act.W3").T) * (1.0 - c["h2"] ** 2)
    dh1, dW, db = conv3_backward(dh2, c["act.cols2"], P("act.W2"))
    grads[key("act.W2")] += dW
    grads[key("act.b2")] += db
    dh1 = dh1 * (1.0 - c["h1"] ** 2)
    dx, dW, db = conv3_backward(dh1, c["act.cols1"], P("act.W1"))
    grads[key("act.W1")] += dW
    grads[key("act.b1")] += db
    dE += dx

    # attention head
    dl = g["Lambda_logits"][:, None]
    dk1, dW, db = conv3_backward(dl, c["att.cols2"], P("att.W2"))
    grads[key("att.W2")] += dW
    grads[key("att.b2")] += db
    dk1 = dk1 * (1.0 - c["k1"] ** 2)
    dx, dW, db = conv3_backward(dk1, c["att.cols1"], P("att.W1"))
    grads[key("att.W1")] += dW
    grads[key("att.b1")] += db
    dE += dx

    # embedding
    dpre = dE * (1.0 - c["E"] ** 2)
    _, dW, db = conv3_backward(dpre, c["emb.cols"], P("emb.W"))
    grads[key("emb.W")] += dW
    grads[key("emb.b")] += db


@dataclass
class Batch:
    rgb: np.ndarray
    flow: np.ndarray
    y: np.ndarray  # multi-hot video label over N_c
    labels: dict[str, TrainingLabels]  # keyed by part: rgb, flow, fused


def part_losses(out: ModelOutputs, y, labels: TrainingLabels, mu: float, terms=LOSS_TERMS) -> dict[str, float]:
    """Forward-only loss terms for one part (no gradients)."""
    vals = dict.fromkeys(LOSS_TERMS, 0.0)
    if "cls_video" in terms and np.any(y):
        vals["cls_video"] = loss_video(video_class_prob(out.Psi, out.Lambda), y)
    if "cls_snippet" in terms:
        vals["cls_snippet"] = loss_snippet(out.Psi, labels, mu)
    if "action" in terms:
        vals["action"] = loss_action(out.A, labels, mu)
    if "emb" in terms:
        vals["emb"] = loss_embed(out.E, labels.pairs)
    return vals


def loss_value(params, batch: Batch, mu: float, terms=LOSS_TERMS, parts=PARTS) -> float:
    outs = forward_all(batch.rgb, batch.flow, params)
    return float(sum(sum(part_losses(outs[p], batch.y, batch.labels[p], mu, terms).values()) for p in parts))


def loss_and_grad(params, batch: Batch, mu: float, terms=LOSS_TERMS, parts=PARTS):
    """Total loss (sum of the selected terms over the selected parts) and its
    gradient w.r.t. every parameter, as float64 arrays."""
    outs = forward_all(batch.rgb, batch.flow, params)
    grads = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}
    breakdown = {}
    g = {}
    for part in PARTS:
        if part in parts:
            vals, g[part] = _loss_and_output_grads(outs[part], batch.y, batch.labels[part], mu, terms)
        else:
            vals = dict.fromkeys(LOSS_TERMS, 0.0)
            T = outs[part].T
            g[part] = {"PsiLogits": np.zeros_like(outs[part].PsiLogits), "A_logits": np.zeros(T),
                       "Lambda_logits": np.zeros(T), "E": np.zeros_like(outs[part].E)}
        for t, v in vals.items():
            breakdown[f"{part}.{t}"] = v

    # fused scores are linear in the stream scores
    gf = g["fused"]
    for kind, sk in (("A", "A_logits"), ("Psi", "PsiLogits"), ("Lambda", "Lambda_logits")):
        w = np.asarray(params[f"fuse.{kind}"], dtype=np.float64)
        s_rgb, s_flow = getattr(outs["rgb"], sk), getattr(outs["flow"], sk)
        grads[f"fuse.{kind}"] += np.array([np.sum(gf[sk] * s_rgb), np.sum(gf[sk] * s_flow)])
        g["rgb"][sk] = g["rgb"][sk] + w[0] * gf[sk]
        g["flow"][sk] = g["flow"][sk] + w[1] * gf[sk]
    De = outs["rgb"].E.shape[1]
    g["rgb"]["E"] = g["rgb"]["E"] + gf["E"][:, :De]
    g["flow"]["E"] = g["flow"]["E"] + gf["E"][:, De:]

    for stream in STREAMS:
        _stream_backward(params, stream, outs[stream], g[stream], grads)

    total = float(sum(breakdown.values()))
    return total, breakdown, grads


# ---------------------------------------------------------------- optimiser

class AdamW:
    """Adam with decoupled weight decay; moments kept in float64."""

    def __init__(self, lr=1e-4, weight_decay=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        new = {}
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p64 = np.asarray(p, dtype=np.float64)
            p64 = p64 * (1.0 - self.lr * self.weight_decay)
            p64 = p64 - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            with np.errstate(over="ignore", invalid="ignore"):
                new[k] = p64.astype(p.dtype)  # overflow surfaces in check_finite
        return new


def train_step(batch: Batch, params, opt: AdamW, mu: float):
    """One forward/backward pass over every part and one optimizer update."""
    total, breakdown, grads = loss_and_grad(params, batch, mu)
    for k, v in breakdown.items():
        if not np.isfinite(v):
            raise NumericalError(f"non-finite loss term {k} = {v}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
    new = opt.step(params, grads)
    check_finite(new)
    breakdown["total"] = total
    return new, opt, breakdown
