"""SGD and Adam updates on lists of float64 arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _check(params, grads, what="grads") -> None:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} {what}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch at {i}: param {np.shape(p)} vs {what} {np.shape(g)}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """``p - lr * g`` for every pair."""
    _check(params, grads)
    return [p - lr * g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def to_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.step}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls([np.asarray(a) for a in d["m"]], [np.asarray(a) for a in d["v"]], int(d["step"]))


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.9,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam update; returns new params and a new state."""
    _check(params, grads)
    _check(params, state.m, "first moments")
    _check(params, state.v, "second moments")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class Sgd:
    lr: float

    def step(self, params, grads):
        return sgd_step(params, grads, self.lr)

    def state_dict(self) -> dict:
        return {"lr": self.lr}


@dataclass
class Adam:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    state: AdamState | None = field(default=None, repr=False)

    def step(self, params, grads):
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        params, self.state = adam_step(params, grads, self.state, self.lr,
                                       self.beta1, self.beta2, self.eps)
        return params

    def state_dict(self) -> dict:
        d = {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        if self.state is not None:
            d.update(self.state.to_dict())
        return d
