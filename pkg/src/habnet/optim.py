"""Adam with a reciprocal learning-rate decay."""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def learning_rate(lr0, decay, step):
    """``lr0 / (1 + decay * k)`` with ``k = step - 1`` (first step uses lr0)."""
    return lr0 / (1.0 + decay * (step - 1))


def adam_update(params, grads, state, step, lr0=1e-5, decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam step in place; returns the rate used."""
    if step < 1:
        raise ValueError("step must be >= 1")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k} at step {step}")
    lr = learning_rate(lr0, decay, step)
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.step = step
    return lr


class Adam:
    def __init__(self, lr=1e-5, decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, params, grads):
        return adam_update(
            params, grads, self.state, self.state.step + 1, self.lr, self.decay, self.beta1, self.beta2, self.eps
        )
