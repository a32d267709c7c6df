from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int
    worst: tuple | None = None  # (param index, flat coordinate)

    def __float__(self) -> float:
        return self.max_error


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, list]:
    with ops.record_kinks() as kinks:
        loss = loss_fn()
    value = float(loss.data)
    if not np.isfinite(value):
        raise GradCheckError(f"loss is not finite ({value})")
    return value, list(kinks)


def grad_check_report(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
                      max_coords: int = 256, seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients with central differences on sampled coordinates.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``. A coordinate is
    skipped when the ``+eps`` / ``-eps`` evaluations see a different relu sign
    pattern or max-pool winner than the unperturbed point, since a central
    difference across a kink is meaningless.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    for p in params:
        if p.data.dtype != np.float64:
            raise GradCheckError("gradient checking requires float64 parameters")
    for p in params:
        p.grad = None
    with ops.record_kinks() as base_kinks:
        loss = loss_fn()
    if not np.isfinite(float(loss.data)):
        raise GradCheckError("loss is not finite")
    base_kinks = list(base_kinks)
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus, k_plus = _evaluate(loss_fn)
            flat[k] = orig - eps
            f_minus, k_minus = _evaluate(loss_fn)
            flat[k] = orig
            if k_plus != base_kinks or k_minus != base_kinks:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[pi].reshape(-1)[k])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            checked += 1
            if err > worst:
                worst, worst_at = err, (pi, int(k))
    return GradCheckReport(worst, checked, skipped, worst_at)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               max_coords: int = 256, seed: int = 0) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_report(loss_fn, params, eps, max_coords, seed).max_error
