"""Plain gradient descent and Adam over named parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class SGD:
    momentum: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if self.momentum:
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(param)
            v *= self.momentum
            v += grad
            grad = v
        param -= param.dtype.type(lr) * grad


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        t = self.steps  # already advanced for this step
        mhat = m / (1.0 - self.beta1 ** t)
        vhat = v / (1.0 - self.beta2 ** t)
        param -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(param.dtype)


def make_optimizer(kind: str = "adam", **kwargs):
    if kind == "adam":
        return Adam(**kwargs)
    if kind == "sgd":
        return SGD(**kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(state, params: Mapping[str, Tensor], gradients: Mapping[str, np.ndarray],
                   learning_rate: float) -> Mapping[str, Tensor]:
    """Update ``params`` in place from ``gradients`` and advance ``state``.

    Parameters without an entry in ``gradients`` are left alone.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    for name, g in gradients.items():
        if name in params and np.shape(g) != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, param {params[name].shape}")
    state.steps += 1
    for name, g in gradients.items():
        if g is None or name not in params:
            continue
        state.update(name, params[name].data, np.asarray(g, dtype=params[name].dtype), learning_rate)
    return params
