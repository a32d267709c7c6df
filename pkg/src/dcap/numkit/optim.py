from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    base_lr: float = field(init=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.base_lr = self.lr


class SGD:
    """Stochastic gradient descent with (Nesterov) momentum and L2 weight decay.

    Update per parameter ``w`` with gradient ``g``::

        d = g + weight_decay * w
        v = momentum * v + d
        step = d + momentum * v   if nesterov else v
        w -= lr * step
    """

    def __init__(self, groups: Sequence[ParamGroup] | Sequence[Tensor], lr: float | None = None,
                 momentum: float = 0.9, nesterov: bool = True, weight_decay: float = 5e-4):
        if groups and isinstance(groups[0], Tensor):
            if lr is None:
                raise ValueError("lr is required when passing bare parameters")
            groups = [ParamGroup(list(groups), lr)]
        self.groups: list[ParamGroup] = list(groups)
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}
        for grp in self.groups:
            for p in grp.params:
                self.velocity[id(p)] = np.zeros_like(p.data)

    @property
    def params(self) -> list[Tensor]:
        return [p for grp in self.groups for p in grp.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        mu, wd = self.momentum, self.weight_decay
        for grp in self.groups:
            for p in grp.params:
                if p.grad is None:
                    continue
                if p.grad.shape != p.data.shape:
                    raise ShapeError("sgd_step", "gradient shape differs from parameter", p.shape, p.grad.shape)
                d = p.grad + wd * p.data if wd else p.grad
                v = self.velocity[id(p)]
                v *= mu
                v += d
                step = d + mu * v if self.nesterov else v
                p.data -= (grp.lr * step).astype(p.data.dtype, copy=False)

    def set_lr_scale(self, factor: float) -> None:
        for grp in self.groups:
            grp.lr = grp.base_lr * factor

    def state_arrays(self) -> list[np.ndarray]:
        return [self.velocity[id(p)] for p in self.params]


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray], lr: float,
             momentum: float = 0.9, nesterov: bool = True, weight_decay: float = 5e-4) -> None:
    """Functional form of one :class:`SGD` update on explicit buffers (in place)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for p, g, v in zip(params, grads, velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError("sgd_step", "parameter, gradient and velocity shapes must agree", p.shape, g.shape, v.shape)
        d = g + weight_decay * p.data
        v *= momentum
        v += d
        p.data -= lr * (d + momentum * v if nesterov else v)


def multistep_factor(progress: float, milestones: Sequence[float], gamma: float = 0.1) -> float:
    """Learning-rate multiplier after ``progress`` units given decay milestones."""
    return gamma ** sum(1 for m in milestones if progress >= m)
