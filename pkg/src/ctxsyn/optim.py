"""AdaMax parameter updates (infinity-norm Adam variant)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

EPS = 1e-8


class NonFiniteGradient(ValueError):
    """A gradient contained NaN or infinity; the step was not applied."""


@dataclass
class AdaMaxState:
    """Per-parameter first moment and infinity-norm accumulator."""

    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    u: List[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 0.001


def adamax_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                state: AdaMaxState) -> None:
    """Apply one AdaMax update in place.

    m <- b1*m + (1-b1)*g;  u <- max(b2*u, |g|);
    theta <- theta - lr/(1 - b1^t) * m / (u + eps).

    A non-finite gradient rejects the whole step and leaves both the
    parameters and the state untouched.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.u = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        if m.shape != p.shape:
            raise ShapeError(f"state shape {m.shape} != param shape {p.shape}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; step rejected")

    t = state.step + 1
    scale = state.lr / (1.0 - state.beta1 ** t)
    for p, g, m, u in zip(params, grads, state.m, state.u):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p -= scale * m / (u + EPS)
    state.step = t


class AdaMax:
    """Optimizer wrapper binding AdaMax state to a list of Tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999):
        self.params = list(params)
        self.state = AdaMaxState(beta1=beta1, beta2=beta2, lr=lr)

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise ValueError("parameter has no gradient; run backward first")
            grads.append(p.grad)
        adamax_step([p.data for p in self.params], grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
