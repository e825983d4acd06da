"""Adam optimizer with optional per-step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    """Per-parameter moment accumulators keyed by parameter name."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class MissingGradientError(RuntimeError):
    """A trainable parameter was stepped without a populated gradient."""


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup, scaled by model width."""
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Bias-corrected Adam over a fixed set of named parameters.

    ``step`` applies the update to the given subset (default: all bound
    parameters), skips frozen parameters, and clears the gradients it
    consumed.  A schedule, when provided, overrides the fixed learning rate
    each step.
    """

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, schedule=None):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names bound to one optimizer")
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.schedule = schedule

    def step(self, active=None):
        params = self.params if active is None else list(active)
        st = self.state
        st.t += 1
        lr = self.schedule(st.t) if self.schedule is not None else st.lr
        for p in params:
            if not p.trainable:
                continue
            if p.grad is None:
                raise MissingGradientError(f"parameter {p.name!r} has no gradient")
            m = st.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                st.m[p.name] = m
                st.v[p.name] = np.zeros_like(p.data)
            v = st.v[p.name]
            m *= st.beta1
            m += (1.0 - st.beta1) * p.grad
            v *= st.beta2
            v += (1.0 - st.beta2) * p.grad * p.grad
            mhat = m / (1.0 - st.beta1 ** st.t)
            vhat = v / (1.0 - st.beta2 ** st.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + st.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def assert_all_parameters(params) -> list[Parameter]:
    bad = [p for p in params if not isinstance(p, Parameter)]
    if bad:
        raise TypeError(f"expected Parameters, got {bad[:1]}")
    return list(params)
