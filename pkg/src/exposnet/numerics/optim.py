from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from exposnet.numerics.layers import Parameter


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Parameter], state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Classic Adam with the L2 penalty folded into the gradient.

    Updates ``params`` in place from their ``.grad`` fields.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)
    return state


def step_lr(base_lr: float, epoch: int, factor: float = 0.5, every: int = 5) -> float:
    """Learning rate for a 0-based ``epoch`` under step decay."""
    return base_lr * factor ** (epoch // every)


def grad_check(f, grad_f, point, eps: float = 1e-3, n_probes: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``grad_f(point)`` and central differences of ``f``.

    ``f`` maps an array to a scalar and is evaluated in float64. When
    ``n_probes`` is given only that many random coordinates are compared.
    The relative error uses ``max(|a|, |n|, 1e-2)`` as denominator so that
    near-zero gradients compare on an absolute scale.
    """
    x = np.array(point, dtype=np.float64)
    analytic = np.asarray(grad_f(x.copy()), dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    if n_probes is None or n_probes >= flat.size:
        idx = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=n_probes, replace=False)
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        num = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-2))
    return worst
