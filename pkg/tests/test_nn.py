"""Network core: gradients against finite differences, Adam, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiaslab import nn
from helpers import fd_param_grads, max_grad_error, random_small_model

# frozen with mpmath at 40 digits: (1 - 0.5**0.7)/0.7 and -0.5**(0.7-1)
GCE_LOSS_HALF = 0.5491825618964884
GCE_DLDP_HALF = -1.2311444133449163
# exp([1,2,3]) softmax, same precision
SOFTMAX_123 = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]


def test_init_bounds_and_bias():
    model = nn.init_mlp(30, [100, 100], 10, seed=7)
    for W, b in model.layers:
        bound = np.sqrt(6.0 / W.shape[0])
        assert np.all(np.abs(W) <= bound)
        assert np.std(W) > 0.1 * bound  # actually random, not degenerate
        assert np.all(b == 0.0)
    assert model.layers[0][0].shape == (30, 100)
    assert model.layers[-1][0].shape == (100, 10)


def test_init_deterministic_and_aux_drawn_last():
    a = nn.init_mlp(8, [12], 3, seed=11)
    b = nn.init_mlp(8, [12], 3, seed=11)
    c = nn.init_mlp(8, [12], 3, seed=11, aux_classes=4)
    for (Wa, ba), (Wb, bb), (Wc, bc) in zip(a.layers, b.layers, c.layers):
        assert np.array_equal(Wa, Wb) and np.array_equal(ba, bb)
        # aux head must not disturb the task parameter stream
        assert np.array_equal(Wa, Wc) and np.array_equal(ba, bc)
    assert c.aux_head is not None and c.aux_head[0].shape == (12, 4)
    d = nn.init_mlp(8, [12], 3, seed=12)
    assert not np.array_equal(a.layers[0][0], d.layers[0][0])


def test_softmax_frozen_values_and_stability():
    p = nn.softmax_probs(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(p, SOFTMAX_123, rtol=0, atol=1e-15)
    # huge logits must not overflow thanks to max subtraction
    p = nn.softmax_probs(np.array([[1e4, 1e4 - 5.0, 0.0]]))
    assert np.isfinite(p).all() and abs(p.sum() - 1.0) < 1e-12
    # shift invariance
    z = np.random.default_rng(0).normal(size=(4, 6))
    assert np.allclose(nn.softmax_probs(z), nn.softmax_probs(z + 123.4), atol=1e-12)
    with pytest.raises(ValueError):
        nn.softmax_probs(np.array([1.0, np.inf]))


def test_forward_shape_error_names_layer():
    model = nn.init_mlp(5, [7], 3, seed=0)
    with pytest.raises(nn.LayerShapeError) as exc:
        nn.forward(model, np.zeros((2, 6)))
    assert exc.value.layer == 0
    assert "layer 0" in str(exc.value)


def test_single_linear_layer_identity():
    # no hidden layers: logits are exactly X @ W + b
    model = nn.MlpModel([(np.eye(3), np.zeros(3))])
    X = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]])
    assert np.array_equal(nn.forward(model, X), X)


def test_ce_backward_matches_finite_differences():
    for seed in range(12):
        model, X, y, w = random_small_model(seed)
        grad = nn.weighted_cross_entropy_backward(model, X, y, w)

        def loss():
            logits = nn.forward(model, X)
            p = nn.prob_of_label(logits, y)
            return float(np.sum(w * -np.log(p)) / X.shape[0])

        assert abs(grad.mean_loss - loss()) < 1e-12
        numeric = fd_param_grads(loss, model)
        assert max_grad_error(grad.params(), numeric) < 1e-7


def test_aux_backward_matches_finite_differences():
    for seed in range(6):
        model, X, _, w = random_small_model(seed, aux=True)
        y4 = np.random.default_rng(seed).integers(0, 4, size=X.shape[0])
        grad = nn.weighted_cross_entropy_backward(model, X, y4, w, head="aux")

        def loss():
            logits = nn.forward_aux(model, X)
            p = nn.prob_of_label(logits, y4)
            return float(np.sum(w * -np.log(p)) / X.shape[0])

        numeric = fd_param_grads(loss, model)
        assert max_grad_error(grad.params(), numeric) < 1e-7
        # task head untouched by the aux loss
        dW_task, db_task = grad.layer_grads[-1]
        assert not dW_task.any() and not db_task.any()


def test_backward_ascent_is_exact_negation():
    model, X, y, w = random_small_model(3)
    down = nn.weighted_cross_entropy_backward(model, X, y, w, sign=1)
    up = nn.weighted_cross_entropy_backward(model, X, y, w, sign=-1)
    for a, b in zip(down.params(), up.params()):
        assert np.array_equal(a, -b)
    assert down.mean_loss == up.mean_loss  # loss reported unsigned


def test_backward_linear_in_weights_and_full_batch_norm():
    model, X, y, w = random_small_model(5)
    g1 = nn.weighted_cross_entropy_backward(model, X, y, w)
    g2 = nn.weighted_cross_entropy_backward(model, X, y, 2.0 * w)
    for a, b in zip(g1.params(), g2.params()):
        assert np.allclose(2.0 * a, b, atol=1e-15)
    # zeroing a sample's weight removes it but B stays in the denominator
    w0 = w.copy()
    w0[0] = 0.0
    g0 = nn.weighted_cross_entropy_backward(model, X, y, w0)
    g_rest = nn.weighted_cross_entropy_backward(model, X[1:], y[1:], w0[1:])
    scale = (X.shape[0] - 1) / X.shape[0]
    for a, b in zip(g0.params(), g_rest.params()):
        assert np.allclose(a, scale * b, atol=1e-12)
    with pytest.raises(ValueError):
        nn.weighted_cross_entropy_backward(model, X, y, -w)


def test_logit_grad_closed_form():
    model, X, y, w = random_small_model(8)
    grad = nn.weighted_cross_entropy_backward(model, X, y, w)
    probs = nn.softmax_probs(nn.forward(model, X))
    expect = probs.copy()
    expect[np.arange(len(y)), y] -= 1.0
    expect *= (w / len(y))[:, None]
    assert np.allclose(grad.logit_grads, expect, atol=1e-15)


def test_gce_frozen_value_and_limit():
    loss, dldp = nn.gce_loss(0.5, 0.7)
    assert abs(loss - GCE_LOSS_HALF) < 1e-14
    assert abs(dldp - GCE_DLDP_HALF) < 1e-14
    # q -> 0 recovers cross entropy
    loss_tiny, _ = nn.gce_loss(0.5, 1e-9)
    assert abs(loss_tiny - (-np.log(0.5))) < 1e-6
    # q = 1 is the linear 1 - p loss
    loss1, dldp1 = nn.gce_loss(0.25, 1.0)
    assert abs(loss1 - 0.75) < 1e-15 and abs(dldp1 + 1.0) < 1e-15
    with pytest.raises(ValueError):
        nn.gce_loss(0.5, 0.0)
    with pytest.raises(ValueError):
        nn.gce_loss(0.0, 0.5)


@given(st.floats(0.01, 1.0), st.floats(0.05, 1.0))
@settings(max_examples=60, deadline=None)
def test_gce_derivative_matches_fd(p, q):
    h = 1e-7 * max(p, 1e-3)
    if p - h <= 0:
        p = p + 2 * h
    lp, _ = nn.gce_loss(p + h, q)
    lm, _ = nn.gce_loss(p - h, q)
    _, dldp = nn.gce_loss(p, q)
    assert abs(dldp - (lp - lm) / (2 * h)) < 1e-4 * max(1.0, abs(dldp))


def test_gce_backward_matches_finite_differences():
    model, X, y, _ = random_small_model(9)
    q = 0.7
    grad = nn.gce_backward(model, X, y, q)

    def loss():
        p = nn.prob_of_label(nn.forward(model, X), y)
        return float(np.mean((1.0 - p**q) / q))

    assert abs(grad.mean_loss - loss()) < 1e-12
    numeric = fd_param_grads(loss, model)
    assert max_grad_error(grad.params(), numeric) < 1e-7


def test_adam_first_step_identity():
    # with zero moments, step 1 moves each param by lr * g / (|g| + eps)
    W = np.array([[1.0, -2.0]])
    model = nn.MlpModel([(W.copy(), np.zeros(2))])
    state = nn.init_adam(model)
    g = nn.zero_grads(model)
    g.layer_grads[0][0][:] = np.array([[0.3, -0.2]])
    nn.adam_step(model, g, state)
    assert state.t == 1
    # frozen: 0.001 * |g| / (|g| + 1e-8) for g = 0.3 and g = -0.2
    assert abs((W[0, 0] - model.layers[0][0][0, 0]) - 0.0009999999666666678) < 1e-14
    assert abs((model.layers[0][0][0, 1] - W[0, 1]) - 0.0009999999500000025) < 1e-14


def test_adam_trajectory_deterministic():
    def run():
        model = nn.init_mlp(6, [8], 3, seed=42)
        state = nn.init_adam(model)
        rng = np.random.default_rng(7)
        X = rng.normal(size=(16, 6))
        y = rng.integers(0, 3, size=16)
        for _ in range(25):
            g = nn.weighted_cross_entropy_backward(model, X, y, np.ones(16))
            nn.adam_step(model, g, state)
        return model, g.mean_loss

    m1, l1 = run()
    m2, l2 = run()
    assert l1 == l2
    for a, b in zip(m1.params(), m2.params()):
        assert np.array_equal(a, b)


def test_adam_actually_learns():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(64, 4))
    y = (X[:, 0] > 0).astype(int)
    model = nn.init_mlp(4, [16], 2, seed=1)
    state = nn.init_adam(model)
    first = None
    for _ in range(600):
        g = nn.weighted_cross_entropy_backward(model, X, y, np.ones(64))
        if first is None:
            first = g.mean_loss
        nn.adam_step(model, g, state)
    assert g.mean_loss < 0.1 * first


def test_grad_add_scaled():
    model, X, y, w = random_small_model(2)
    g1 = nn.weighted_cross_entropy_backward(model, X, y, w)
    g2 = nn.weighted_cross_entropy_backward(model, X, y, 0.5 * w)
    total = nn.zero_grads(model)
    total.add_scaled(g1).add_scaled(g2, 2.0)
    for t, a in zip(total.params(), g1.params()):
        assert np.allclose(t, 2.0 * a, atol=1e-15)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = nn.init_mlp(5, [9, 7], 3, seed=3, aux_classes=4)
    state = nn.init_adam(model, nn.AdamConfig(lr=0.002))
    X = np.random.default_rng(1).normal(size=(8, 5))
    y = np.random.default_rng(2).integers(0, 3, size=8)
    for _ in range(3):
        g = nn.weighted_cross_entropy_backward(model, X, y, np.ones(8))
        nn.adam_step(model, g, state)
    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(path, model, state)
    loaded, lstate = nn.load_checkpoint(path)
    for a, b in zip(model.params(), loaded.params()):
        assert np.array_equal(a, b)
    assert lstate.t == state.t and lstate.cfg.lr == 0.002
    for a, b in zip(state.m + state.v, lstate.m + lstate.v):
        assert np.array_equal(a, b)
    # resuming from the loaded pair continues the same trajectory
    ga = nn.weighted_cross_entropy_backward(model, X, y, np.ones(8))
    gb = nn.weighted_cross_entropy_backward(loaded, X, y, np.ones(8))
    nn.adam_step(model, ga, state)
    nn.adam_step(loaded, gb, lstate)
    for a, b in zip(model.params(), loaded.params()):
        assert np.array_equal(a, b)


def test_checkpoint_without_adam(tmp_path):
    model = nn.init_mlp(4, [6], 2, seed=5)
    path = tmp_path / "bare.ckpt"
    nn.save_checkpoint(path, model)
    loaded, state = nn.load_checkpoint(path)
    assert state is None
    for a, b in zip(model.params(), loaded.params()):
        assert np.array_equal(a, b)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    model = nn.init_mlp(4, [6], 2, seed=5)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, model)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(nn.CheckpointError, match="magic"):
        nn.load_checkpoint(bad)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(raw[:-16])
    with pytest.raises((nn.CheckpointError, ValueError)):
        nn.load_checkpoint(trunc)
    trail = tmp_path / "trail.ckpt"
    trail.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(nn.CheckpointError, match="trailing"):
        nn.load_checkpoint(trail)
