from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, MutableMapping

import numpy as np

from .rng import XorShift64Star


class TrainingError(RuntimeError):
    """Raised when a gradient or loss turns non-finite."""


def glorot_uniform(rng: XorShift64Star, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, shape)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.step,
                         {k: v.copy() for k, v in self.first_moment.items()},
                         {k: v.copy() for k, v in self.second_moment.items()})


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scales ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: MutableMapping[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place.

    An all-zero gradient only advances the step counter; parameters and
    moments are left as they are.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.step}")
    state.step += 1
    if all(not np.any(g) for g in grads.values()):
        return state
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(g)
            state.second_moment[name] = np.zeros_like(g)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state
