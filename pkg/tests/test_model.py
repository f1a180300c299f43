import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from detal.core import Config
from detal.gradcheck import check_instance, random_instance
from detal.model import (LOG_CLAMP, LOSS_TERMS, PARTS, AdamW, Batch, ModelOutputs, NumericalError, TrainingLabels,
                         forward, forward_all, fuse, init_params, loss_and_grad, loss_embed, loss_action,
                         loss_snippet, loss_value, loss_video, train_step, video_class_prob)


def _params(cfg, seed=0):
    return init_params(cfg, np.random.default_rng(seed))


def _outputs(psi_logits, a_logits, l_logits):
    from detal.model import sigmoid, softmax
    z = np.asarray(psi_logits, dtype=np.float64)
    a = np.asarray(a_logits, dtype=np.float64)
    l_ = np.asarray(l_logits, dtype=np.float64)
    return ModelOutputs(np.zeros((len(a), 2)), sigmoid(a), softmax(z), sigmoid(l_), z, a, l_)


def test_zero_weights_give_neutral_outputs():
    cfg = Config(N_c=3, D=6)
    params = {k: np.zeros_like(v) for k, v in _params(cfg).items()}
    out = forward(np.random.default_rng(0).normal(size=(7, 6)), params, "rgb")
    assert np.allclose(out.A, 0.5) and np.allclose(out.Lambda, 0.5)
    assert np.allclose(out.Psi, 1 / 4)


def test_output_shapes():
    cfg = Config(N_c=3, D=6)
    out = forward(np.random.default_rng(0).normal(size=(5, 6)), _params(cfg), "flow")
    assert out.Psi.shape == (5, 4) and out.A.shape == (5,) and out.Lambda.shape == (5,)
    assert out.E.shape == (5, cfg.E_dim)


def test_shape_mismatch_rejected():
    cfg = Config(N_c=2, D=6)
    with pytest.raises(ValueError):
        forward(np.zeros((5, 7)), _params(cfg), "rgb")


def test_translation_equivariance_in_interior():
    cfg = Config(N_c=2, D=5)
    params = _params(cfg, 1)
    X = np.random.default_rng(2).normal(size=(20, 5))
    shifted = np.vstack([np.zeros((1, 5)), X[:-1]])
    a, b = forward(X, params, "rgb"), forward(shifted, params, "rgb")
    # receptive field is 7 snippets wide (three stacked width-3 convolutions)
    assert np.allclose(a.Psi[4:-4], b.Psi[5:-3])
    assert np.allclose(a.A[4:-4], b.A[5:-3])


def test_forward_bit_deterministic():
    cfg = Config(N_c=2, D=5)
    params = _params(cfg, 1)
    X = np.random.default_rng(2).normal(size=(9, 5))
    a, b = forward(X, params, "rgb"), forward(X, params, "rgb")
    assert np.array_equal(a.Psi, b.Psi) and np.array_equal(a.E, b.E)


def _fuse_weights(wa, wf):
    return {f"fuse.{k}": np.array([wa, wf]) for k in ("A", "Psi", "Lambda")}


def test_fuse_degenerate_weights():
    r = _outputs([[1.0, -1.0, 0.2]], [0.3], [-0.4])
    f = _outputs([[0.0, 2.0, 1.0]], [1.3], [0.9])
    out = fuse(r, f, _fuse_weights(1.0, 0.0))
    assert np.allclose(out.Psi, r.Psi) and np.allclose(out.A, r.A) and np.allclose(out.Lambda, r.Lambda)


def test_fuse_identical_streams_half_weights():
    r = _outputs([[1.0, -1.0, 0.2]], [0.3], [-0.4])
    out = fuse(r, r, _fuse_weights(0.5, 0.5))
    assert np.allclose(out.Psi, r.Psi) and np.allclose(out.A, r.A)


def test_fuse_opposite_logits_cancel():
    r = _outputs([[1.0, -1.0, 0.2]], [0.3], [-0.4])
    f = _outputs([[-1.0, 1.0, -0.2]], [-0.3], [0.4])
    out = fuse(r, f, _fuse_weights(0.5, 0.5))
    assert np.allclose(out.PsiLogits, 0.0) and np.allclose(out.Psi, 1 / 3)


def test_fuse_concatenates_embeddings_and_checks_length():
    cfg = Config(N_c=2, D=4)
    p = _params(cfg)
    X = np.random.default_rng(0).normal(size=(6, 4))
    o = forward_all(X, X, p)
    assert o["fused"].E.shape == (6, 2 * cfg.E_dim)
    with pytest.raises(ValueError):
        fuse(o["rgb"], forward(X[:5], p, "flow"), p)


def test_video_class_prob_examples():
    psi = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # last column is background
    assert np.allclose(video_class_prob(psi, [1.0, 1.0]), [0.881, 0.119], atol=1e-3)
    assert np.allclose(video_class_prob(psi, [0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(video_class_prob(np.array([[0.3, 0.7]]), [1.0]), [1.0])


def test_loss_video_examples():
    assert loss_video([1.0, 0.0], [1, 0]) == 0.0
    assert loss_video([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))
    assert loss_video([0.5, 0.5], [1, 1]) == pytest.approx(2 * math.log(2))


def _lab(actions, bg=()):
    return TrainingLabels(actions=[(np.array(i), c) for i, c in actions], background=np.array(bg, dtype=np.int64))


def test_loss_snippet_examples():
    psi = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert loss_snippet(psi, _lab([([0], 0)]), 0.1) == 0.0
    psi = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert loss_snippet(psi, _lab([([0], 0)], [1]), 0.1) == pytest.approx(1.1 * math.log(2))
    psi = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert loss_snippet(psi, _lab([([0], 0), ([1], 1)], [2]), 0.1) == 0.0


def test_loss_action_examples():
    assert loss_action(np.array([1.0, 0.0]), _lab([([0], 0)], [1]), 0.1) == 0.0
    assert loss_action(np.array([0.5]), _lab([([0], 0)]), 0.1) == pytest.approx(math.log(2))
    assert loss_action(np.array([0.5, 0.5]), _lab([([0], 0)], [1]), 0.1) == pytest.approx(1.1 * math.log(2))


def test_loss_embed_examples():
    E = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert loss_embed(E, [[0, 1, 1]]) == pytest.approx(0.0, abs=1e-9)
    assert loss_embed(E, [[0, 1, 0]]) == pytest.approx(-math.log(LOG_CLAMP), rel=1e-6)
    assert loss_embed(E, [[0, 2, 1]]) == pytest.approx(1.0)


def _batch(cfg, T=6, seed=0, bg=True):
    rng = np.random.default_rng(seed)
    lab = TrainingLabels(actions=[(np.array([1, 2]), 0)],
                         background=np.array([4, 5] if bg else [], dtype=np.int64),
                         pairs=np.array([[1, 2, 1], [1, 4, 0]]))
    y = np.zeros(cfg.N_c)
    y[0] = 1
    return Batch(rng.normal(size=(T, cfg.D)), rng.normal(size=(T, cfg.D)), y, {p: lab for p in PARTS})


def test_gradients_match_finite_differences_example():
    # T=6, D=8, N_c=2 instance from the gradient example, every coordinate, h=1e-4
    cfg = Config(N_c=2, D=8, embed_dim=4, hidden_dim=4)
    params = {k: v.astype(np.float64) for k, v in _params(cfg, 3).items()}
    batch = _batch(cfg)
    err, _, _ = check_instance(params, batch, cfg.mu, "total", np.random.default_rng(0), h=1e-4, max_coords=10**6)
    assert err < 1e-4


def test_random_instances_per_term():
    rng = np.random.default_rng(5)
    for _ in range(3):
        cfg, params, batch = random_instance(rng)
        for term in LOSS_TERMS:
            err, name, _ = check_instance(params, batch, cfg.mu, term, rng)
            assert err < 1e-4, (term, name, err)


def test_small_step_does_not_increase_loss():
    cfg = Config(N_c=2, D=8)
    params = {k: v.astype(np.float64) for k, v in _params(cfg, 4).items()}
    batch = _batch(cfg)
    before = loss_value(params, batch, cfg.mu)
    new, _, _ = train_step(batch, params, AdamW(lr=1e-6, weight_decay=0.0), cfg.mu)
    assert loss_value(new, batch, cfg.mu) <= before


def test_no_background_term_vanishes():
    cfg = Config(N_c=2, D=8)
    params = _params(cfg, 4)
    with_bg, no_bg = _batch(cfg), _batch(cfg, bg=False)
    assert loss_value(params, with_bg, 0.0) == pytest.approx(loss_value(params, no_bg, 0.0))


def test_loss_and_grad_total_matches_forward_only():
    cfg = Config(N_c=2, D=8)
    params = _params(cfg, 4)
    batch = _batch(cfg)
    total, breakdown, grads = loss_and_grad(params, batch, cfg.mu)
    assert total == pytest.approx(loss_value(params, batch, cfg.mu), rel=1e-12)
    assert set(grads) == set(params)


def test_non_finite_loss_aborts():
    cfg = Config(N_c=2, D=8)
    batch = _batch(cfg)
    params = _params(cfg, 4)
    params["rgb.emb.b"] = params["rgb.emb.b"] + np.nan
    with pytest.raises(NumericalError):
        train_step(batch, params, AdamW(), cfg.mu)


def test_adamw_decoupled_weight_decay():
    opt = AdamW(lr=0.1, weight_decay=0.5)
    new = opt.step({"w": np.array([2.0])}, {"w": np.array([0.0])})
    assert new["w"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_psi_stays_on_simplex_after_training():
    cfg = Config(N_c=2, D=8)
    params = _params(cfg, 4)
    batch = _batch(cfg)
    opt = AdamW(lr=1e-2)
    for _ in range(20):
        params, opt, _ = train_step(batch, params, opt, cfg.mu)
    out = forward_all(batch.rgb, batch.flow, params)
    for part in PARTS:
        assert np.allclose(out[part].Psi.sum(1), 1.0, atol=1e-6)
        assert np.all((out[part].A >= 0) & (out[part].A <= 1))


@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_loss_terms_non_negative(seed, mu):
    cfg, params, batch = random_instance(np.random.default_rng(seed))
    _, breakdown, _ = loss_and_grad(params, batch, mu)
    assert all(v >= 0 for v in breakdown.values())
