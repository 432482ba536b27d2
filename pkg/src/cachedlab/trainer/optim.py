from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(t.values) for k, t in params.items()},
                   {k: np.zeros_like(t.values) for k, t in params.items()})


def lr_at(step_index: int, config) -> float:
    """Linear warmup to ``learning_rate`` over ``warmup_steps``, constant afterwards."""
    if step_index < 1:
        raise ValueError(f"step index starts at 1, got {step_index}")
    if config.warmup_steps == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step_index / config.warmup_steps)


def adamw_step(params, grads: dict[str, np.ndarray], state: AdamState, step_index: int, config) -> float:
    """Decoupled-weight-decay Adam with bias correction. Updates params in place."""
    lr = lr_at(step_index, config)
    b1, b2, eps, wd = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.weight_decay
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for name, t in params.items():
        g = grads[name]
        m, v = state.m.get(name), state.v.get(name)
        if m is None or v is None or m.shape != t.shape or v.shape != t.shape or g.shape != t.shape:
            raise ValueError(f"optimizer state or gradient for {name!r} does not match parameter shape {t.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            t.values *= 1.0 - lr * wd
        t.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = step_index
    return lr
