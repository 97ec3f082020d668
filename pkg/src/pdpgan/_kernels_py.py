"""Pure-numpy fused training kernels.

Same contract as the compiled ``_ckernels`` module; :mod:`pdpgan.kernels`
picks one at import.  Layers compute ``act(h @ W + b)`` with activation
codes 0 = linear, 1 = leaky ReLU, 2 = sigmoid.

The critic kernel differentiates the gradient penalty analytically.  With
piecewise-linear critic activations the input-gradient pass is

    d_K = 1,  d_k = (d_{k+1} W_{k+1}^T) * m_k,  g = d_1 W_1^T

where ``m_k`` is the (constant) activation slope.  Reversing that chain
gives the penalty's weight gradients; biases and the slopes themselves do
not contribute.
"""

from __future__ import annotations

import numpy as np

LINEAR, LEAKY, SIGMOID = 0, 1, 2


def _act(a, code, alpha):
    if code == LEAKY:
        return np.where(a >= 0, a, alpha * a)
    if code == SIGMOID:
        e = np.exp(-np.abs(a))
        return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a


def _slope(a, code, alpha):
    if code == LEAKY:
        return np.where(a > 0, 1.0, alpha)
    return None


def mlp_forward(weights, biases, codes, alpha, x):
    """Return the output and the per-layer (input, post-activation) cache."""
    h = x
    cache = []
    for w, b, code in zip(weights, biases, codes):
        out = _act(h @ w + b, code, alpha)
        cache.append((h, out))
        h = out
    return h, cache


def _backprop(weights, codes, alpha, cache, upstream, want_params, want_input):
    """Reverse pass through a cached forward; returns (dW, db, dx)."""
    n = len(weights)
    dws = [None] * n
    dbs = [None] * n
    d = upstream
    for k in range(n - 1, -1, -1):
        h_in, out = cache[k]
        code = codes[k]
        if code == LEAKY:
            d = d * np.where(out > 0, 1.0, alpha)
        elif code == SIGMOID:
            d = d * out * (1.0 - out)
        if want_params:
            dws[k] = h_in.T @ d
            dbs[k] = d.sum(axis=0)
        if k > 0 or want_input:
            d = d @ weights[k].T
    return dws, dbs, (d if want_input else None)


def critic_step(weights, biases, codes, alpha, real, fake, x_tilde, lam, eps):
    """WGAN-GP critic loss and its parameter gradients.

    Returns ``(d_loss, wasserstein_term, penalty, dW, db)`` where the
    Wasserstein term is ``mean D(fake) - mean D(real)``.
    """
    for code in codes:
        if code == SIGMOID:
            raise ValueError("critic kernel supports linear and leaky ReLU layers only")
    nf, nr, nt = fake.shape[0], real.shape[0], x_tilde.shape[0]
    x = np.concatenate([fake, real, x_tilde], axis=0)
    scores, cache = mlp_forward(weights, biases, codes, alpha, x)
    wdist = scores[:nf].mean() - scores[nf:nf + nr].mean()

    n = len(weights)
    upstream = np.empty((nf + nr + nt, 1))
    upstream[:nf] = 1.0 / nf
    upstream[nf:nf + nr] = -1.0 / nr
    upstream[nf + nr:] = 1.0

    # One reverse sweep serves both the loss rows and the interpolate rows.
    dws = [None] * n
    dbs = [None] * n
    deltas = [None] * n
    slopes = [None] * n
    d = upstream
    for k in range(n - 1, -1, -1):
        h_in, out = cache[k]
        if codes[k] == LEAKY:
            m = np.where(out > 0, 1.0, alpha)
            slopes[k] = m[nf + nr:]
            d = d * m
        deltas[k] = d[nf + nr:]
        dl = d[:nf + nr]
        dws[k] = h_in[:nf + nr].T @ dl
        dbs[k] = dl.sum(axis=0)
        if k > 0:
            d = d @ weights[k].T
        else:
            g = deltas[0] @ weights[0].T

    norms = np.sqrt(np.sum(g * g, axis=1, keepdims=True) + eps)
    gap = norms - 1.0
    penalty = lam * float(np.mean(gap * gap))

    # Reverse the input-gradient chain.
    big_g = (2.0 * lam / nt) * (gap / norms) * g
    dws[0] = dws[0] + big_g.T @ deltas[0]
    delta_adj = big_g @ weights[0]
    for k in range(n - 1):
        r = delta_adj * slopes[k] if slopes[k] is not None else delta_adj
        dws[k + 1] = dws[k + 1] + r.T @ deltas[k + 1]
        if k + 1 < n - 1:
            delta_adj = r @ weights[k + 1]

    return float(wdist + penalty), float(wdist), penalty, dws, dbs


def generator_step(g_weights, g_biases, g_codes, d_weights, d_biases, d_codes, alpha, z):
    """Generator loss ``-mean D(G(z))`` and its generator-parameter gradients."""
    fake, g_cache = mlp_forward(g_weights, g_biases, g_codes, alpha, z)
    scores, d_cache = mlp_forward(d_weights, d_biases, d_codes, alpha, fake)
    upstream = np.full((z.shape[0], 1), -1.0 / z.shape[0])
    _, _, dx = _backprop(d_weights, d_codes, alpha, d_cache, upstream, False, True)
    dws, dbs, _ = _backprop(g_weights, g_codes, alpha, g_cache, dx, True, False)
    return float(-scores.mean()), dws, dbs


def adam_update(params, grads, m, v, step, lr, beta1, beta2, eps):
    """In-place Adam update of ``params``, ``m`` and ``v`` for step number ``step``."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for p, g, mk, vk in zip(params, grads, m, v):
        mk *= beta1
        mk += (1.0 - beta1) * g
        vk *= beta2
        vk += (1.0 - beta2) * (g * g)
        p -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)


def sgd_update(params, grads, lr):
    for p, g in zip(params, grads):
        p -= lr * g
