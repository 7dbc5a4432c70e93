"""Iterative refinement: plain Adam on the flattened solution vector."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 100

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, x):
        return cls(np.zeros_like(x), np.zeros_like(x))


def adam_step(params, grads, moments, cfg, t):
    """One bias-corrected Adam update at step ``t >= 1``; returns new arrays."""
    m = cfg.beta1 * moments.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * moments.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    return params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps), AdamMoments(m, v)


@dataclass
class RefineTrace:
    values: list
    state: object
    wall_time: float
    best_step: int = 0


def refine_iterative(init, objective, cfg=None):
    """Run ``cfg.steps`` Adam steps on ``objective`` from ``init``.

    Returns the best state seen, which may be ``init`` itself. ``values`` holds
    the objective before every step plus the final one.
    """
    cfg = cfg or AdamConfig()
    t0 = time.perf_counter()
    objective.active_terms()
    x = init.to_vector()
    moments = AdamMoments.zeros_like(x)
    state = init
    value, grad = objective.value_and_grad(state)
    values = [value]
    best_value, best_x, best_step = value, x, 0
    for t in range(1, cfg.steps + 1):
        x, moments = adam_step(x, grad, moments, cfg, t)
        state = init.with_vector(x)
        value, grad = objective.value_and_grad(state)
        values.append(value)
        if value < best_value:
            best_value, best_x, best_step = value, x, t
    return RefineTrace(values, init.with_vector(best_x), time.perf_counter() - t0, best_step)
