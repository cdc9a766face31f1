"""SGD with momentum, Adam, and the cosine learning-rate schedule.

The step functions are pure: they take parameter and gradient arrays plus an
:class:`OptimState` and return new arrays and a new state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class OptimState:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: tuple = field(default_factory=tuple)  # per parameter: velocity, or (m, v)


def _check(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"parameter {i}: shape {np.shape(p)} but gradient {np.shape(g)}")


def sgd_step(params, grads, state: OptimState):
    """v <- momentum * v + g + weight_decay * p;  p <- p - lr * v."""
    _check(params, grads)
    buffers = state.buffers or tuple(np.zeros_like(p) for p in params)
    new_params, new_buffers = [], []
    for p, g, v in zip(params, grads, buffers):
        dtype = np.asarray(p).dtype
        v = state.momentum * v + g + state.weight_decay * p
        new_buffers.append(v.astype(dtype))
        new_params.append((p - state.lr * v).astype(dtype))
    return new_params, replace(state, step=state.step + 1, buffers=tuple(new_buffers))


def adam_step(params, grads, state: OptimState):
    """Bias-corrected Adam; weight decay (if any) is added to the gradient."""
    _check(params, grads)
    buffers = state.buffers or tuple((np.zeros_like(p), np.zeros_like(p)) for p in params)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_buffers = [], []
    for p, g, (m, v) in zip(params, grads, buffers):
        dtype = np.asarray(p).dtype
        g = g + state.weight_decay * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append((p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(dtype))
        new_buffers.append((m.astype(dtype), v.astype(dtype)))
    return new_params, replace(state, step=t, buffers=tuple(new_buffers))


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class Optimizer:
    """Applies a step function to a list of tensors in place."""

    def __init__(self, params, name="sgd", **hyper):
        steps = {"sgd": sgd_step, "adam": adam_step}
        if name not in steps:
            raise ValueError(f"unknown optimizer {name!r}; expected one of {sorted(steps)}")
        self.params = list(params)
        self.name = name
        self._step = steps[name]
        self.state = OptimState(**hyper)
        self.base_lr = self.state.lr

    def set_lr(self, lr):
        self.state = replace(self.state, lr=lr)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = self._step([p.data for p in self.params], grads, self.state)
        for p, value in zip(self.params, new):
            p.data = value
