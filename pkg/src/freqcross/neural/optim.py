from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``grads`` aligns with ``params``; pass ``None`` to use each parameter's
    ``.grad`` (missing gradients count as zero).
    """
    params = list(params)
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    grads = list(grads)
    if len(grads) != len(params):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {p.name} has shape {g.shape}, parameter has {p.shape}")
        for moments in (state.m, state.v):
            if p.name in moments and moments[p.name].shape != p.shape:
                raise ShapeMismatch(
                    f"optimizer state for {p.name} has shape {moments[p.name].shape}, parameter has {p.shape}"
                )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g in zip(params, grads):
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return state
