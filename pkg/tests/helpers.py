"""Shared test oracles: finite-difference gradients and model factories."""

import numpy as np

from debiaslab import nn


def fd_param_grads(loss_fn, model, rel_eps=1e-6):
    """Central-difference gradient of loss_fn() w.r.t. every model parameter.

    loss_fn must re-read the (mutated) parameters on each call.
    """
    grads = []
    for p in model.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            h = rel_eps * max(1.0, abs(orig))
            p[idx] = orig + h
            lp = loss_fn()
            p[idx] = orig - h
            lm = loss_fn()
            p[idx] = orig
            g[idx] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def max_grad_error(analytic, numeric):
    """Worst elementwise |a-n| / max(1, |a|, |n|) over parallel param lists."""
    worst = 0.0
    for a, nmr in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(nmr)))
        worst = max(worst, float(np.max(np.abs(a - nmr) / denom)))
    return worst


def random_small_model(seed, aux=False, relu_margin=1e-4, max_tries=20):
    """A small random model + batch whose preactivations stay clear of the
    ReLU kink, so central differences are trustworthy."""
    for attempt in range(max_tries):
        s = seed + 1000 * attempt
        rng = np.random.default_rng(s)
        in_dim = int(rng.integers(3, 7))
        hidden = [int(rng.integers(4, 8)) for _ in range(int(rng.integers(1, 3)))]
        n_cls = int(rng.integers(2, 5))
        model = nn.init_mlp(in_dim, hidden, n_cls, seed=s,
                            aux_classes=4 if aux else None)
        B = int(rng.integers(3, 9))
        X = rng.normal(size=(B, in_dim))
        y = rng.integers(0, n_cls, size=B)
        w = rng.uniform(0.1, 2.0, size=B)
        _, _, preacts = nn._trunk_forward(model, X)
        if min(np.min(np.abs(z)) for z in preacts) > relu_margin:
            return model, X, y, w
    raise RuntimeError("could not find a kink-free configuration")
