from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ShapeError


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class SGD:
    """Heavy-ball momentum SGD: ``v = momentum * v + g``; ``w -= lr * v``.

    Velocities are keyed by parameter identity, so a parameter array shared by
    several consumers (the Siamese branches) is updated exactly once per step.
    """

    def __init__(self, learning_rate=0.01, momentum=0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: dict[int, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: SgdConfig) -> "SGD":
        return cls(cfg.learning_rate, cfg.momentum)

    def step(self, *stacks):
        seen = set()
        for stack in stacks:
            for layer in stack.layers:
                for name, w in layer.params.items():
                    if id(w) not in seen:
                        seen.add(id(w))
                        self.update(w, layer.grads.get(name))

    def update(self, w: np.ndarray, g):
        if g is None:
            return
        if g.shape != w.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {w.shape}")
        v = self._velocity.get(id(w))
        if v is None:
            v = self._velocity[id(w)] = np.zeros_like(w)
        v *= self.momentum
        v += g
        w -= self.learning_rate * v


def sgd_step(stack, param_grads, cfg: SgdConfig, optimizer: SGD | None = None):
    """Apply one update to ``stack`` from ``param_grads`` (iterable of
    ``(layer_index, name, grad)``). Pass the same ``optimizer`` across calls to
    carry momentum."""
    opt = optimizer or SGD.from_config(cfg)
    for i, name, g in param_grads:
        opt.update(stack.layers[i].params[name], g)
    return stack
