"""Fused training kernels, compiled when available.

``BACKEND`` is ``"cython"`` when the ``_ckernels`` extension imported and
``"python"`` otherwise.  Setting ``PDPGAN_PURE_PYTHON=1`` forces the numpy
fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

LINEAR, LEAKY, SIGMOID = _kernels_py.LINEAR, _kernels_py.LEAKY, _kernels_py.SIGMOID
ACTIVATION_CODES = {"linear": LINEAR, "leaky_relu": LEAKY, "sigmoid": SIGMOID}

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("PDPGAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def get_backend(name: str | None = None):
    """Kernel module by name (``"python"``, ``"cython"``) or the default."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def codes(activations) -> list[int]:
    return [ACTIVATION_CODES[a] for a in activations]


def critic_step(weights, biases, codes, alpha, real, fake, x_tilde, lam, eps):
    return _impl.critic_step(weights, biases, codes, alpha, real, fake, x_tilde, lam, eps)


def generator_step(g_weights, g_biases, g_codes, d_weights, d_biases, d_codes, alpha, z):
    return _impl.generator_step(g_weights, g_biases, g_codes, d_weights, d_biases, d_codes, alpha, z)


def mlp_forward(weights, biases, codes, alpha, x):
    return _impl.mlp_forward(weights, biases, codes, alpha, x)[0]


def adam_update(params, grads, m, v, step, lr, beta1, beta2, eps):
    """In-place Adam update; ``step`` is the 1-based step number."""
    _impl.adam_update(params, grads, m, v, step, lr, beta1, beta2, eps)


def sgd_update(params, grads, lr):
    _impl.sgd_update(params, grads, lr)
