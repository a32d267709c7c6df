"""Loss terms for pre-training and meta-finetuning."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .heads import GlobalClassifier, dense_logits, gap
from .numkit import Tensor

PRETRAIN_SMOOTHING = 0.1


class InvariantViolation(ValueError):
    pass


@dataclass
class LossWeights:
    beta: float = 0.1   # entropy regularizer
    gamma: float = 0.5  # global classification on query descriptors

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


def smooth_label(y: int, num_classes: int, eps: float) -> np.ndarray:
    """``(1 - eps) * onehot(y) + eps * uniform``."""
    if not 0 <= eps < 1:
        raise ValueError(f"smoothing must lie in [0, 1), got {eps}")
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} outside [0, {num_classes})")
    out = np.full(num_classes, eps / num_classes)
    out[y] += 1.0 - eps
    return out


def smooth_labels(labels, num_classes: int, eps: float, dtype=None) -> np.ndarray:
    """Row-wise :func:`smooth_label` for a label vector, ``(n, C)``."""
    labels = np.asarray(labels)
    if not 0 <= eps < 1:
        raise ValueError(f"smoothing must lie in [0, 1), got {eps}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label outside class range")
    out = np.full((labels.size, num_classes), eps / num_classes, dtype=dtype or nk.get_default_dtype())
    out[np.arange(labels.size), labels] += 1.0 - eps
    return out


def ce_loss(logits: Tensor, target) -> Tensor:
    """Cross-entropy against soft targets over the last axis (one value per row)."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=logits.dtype))
    logp = nk.log_softmax(logits, axis=-1)
    return -(target * logp).sum(axis=-1)


def nll(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    logp = nk.log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    return -picked.mean()


def pretrain_loss_gap(maps: Tensor, labels, gc: GlobalClassifier, eps: float = PRETRAIN_SMOOTHING) -> Tensor:
    """Smoothed CE of the classifier on pooled embeddings, averaged over the batch."""
    target = smooth_labels(labels, gc.num_classes, eps, maps.dtype)
    return ce_loss(gc.logits(gap(maps)), target).mean()


def pretrain_loss_dc(maps: Tensor, labels, gc: GlobalClassifier, eps: float = PRETRAIN_SMOOTHING,
                     normalize_by_r: bool = False) -> Tensor:
    """Smoothed CE on every descriptor: summed over sites, averaged over images."""
    logits = dense_logits(maps, gc)  # (B, r, C)
    b, r, c = logits.shape
    target = smooth_labels(labels, c, eps, maps.dtype).reshape(b, 1, c)
    per_image = ce_loss(logits, target).sum(axis=-1)
    loss = per_image.mean()
    return nk.scale(loss, 1.0 / r) if normalize_by_r else loss


def meta_loss(query_logits: Tensor, query_labels) -> Tensor:
    """Mean NLL of the episode labels under the nearest-centroid softmax."""
    return nll(query_logits, query_labels)


def entropy_reg(alpha: Tensor) -> Tensor:
    """Mean over rows of ``sum_j alpha_j log alpha_j`` (negative entropy, 0 log 0 = 0)."""
    safe = alpha + Tensor((alpha.data == 0).astype(alpha.dtype), dtype=alpha.dtype)
    return (alpha * nk.log(safe)).sum(axis=-1).mean()


def meta_global_ce(query_maps: Tensor, gc: GlobalClassifier, base_labels, raw_scores: Tensor | None = None,
                   fallback_eps: float = PRETRAIN_SMOOTHING, normalize_by_r: bool = False) -> Tensor:
    """Dense CE of the (frozen) global classifier on query descriptors.

    With attention, the target of descriptor ``j`` is smoothed by
    ``eps = 1 - A_j`` so the target itself depends on the raw score and the
    regressor receives gradient through it. Without attention a constant
    ``fallback_eps`` is used.
    """
    base_labels = np.asarray(base_labels)
    if np.any(base_labels < 0):
        raise ValueError("global classification needs base-class labels (got sentinel)")
    logits = dense_logits(query_maps, gc)  # (B, r, C)
    b, r, c = logits.shape
    onehot = np.zeros((b, 1, c), dtype=logits.dtype)
    onehot[np.arange(b), 0, base_labels] = 1.0
    if raw_scores is None:
        target = Tensor(smooth_labels(base_labels, c, fallback_eps, logits.dtype).reshape(b, 1, c))
    else:
        a = raw_scores.data
        if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
            raise InvariantViolation("raw attention scores must lie in (0, 1)")
        keep = raw_scores.reshape(b, r, 1)
        target = keep * Tensor(onehot) + (1.0 - keep) * (1.0 / c)
    per_image = ce_loss(logits, target).sum(axis=-1)
    loss = per_image.mean()
    return nk.scale(loss, 1.0 / r) if normalize_by_r else loss


@dataclass
class EpisodeTerms:
    """Differentiable pieces of one episode's objective."""

    query_logits: Tensor
    query_labels: np.ndarray
    query_maps: Tensor | None = None
    base_labels: np.ndarray | None = None
    alpha: Tensor | None = None
    raw: Tensor | None = None


@dataclass
class ObjectiveValue:
    total: Tensor
    meta: float
    entropy: float
    global_ce: float


def episode_objective(terms: EpisodeTerms, gc: GlobalClassifier | None, weights: LossWeights,
                      normalize_by_r: bool = False) -> ObjectiveValue:
    lm = meta_loss(terms.query_logits, terms.query_labels)
    total = lm
    ent_v = ce_v = 0.0
    if weights.beta and terms.alpha is not None:
        ent = entropy_reg(terms.alpha)
        total = total + nk.scale(ent, weights.beta)
        ent_v = float(ent.data)
    if weights.gamma and gc is not None and terms.query_maps is not None:
        ce = meta_global_ce(terms.query_maps, gc, terms.base_labels, terms.raw, normalize_by_r=normalize_by_r)
        total = total + nk.scale(ce, weights.gamma)
        ce_v = float(ce.data)
    return ObjectiveValue(total, float(lm.data), ent_v, ce_v)


def total_meta_objective(episodes: Sequence[EpisodeTerms], gc: GlobalClassifier | None,
                         weights: LossWeights | None = None, normalize_by_r: bool = False) -> Tensor:
    """Mean over episodes of ``meta + beta * entropy + gamma * global_ce``.

    Weight decay is left to the optimizer.
    """
    weights = weights or LossWeights()
    values = [episode_objective(t, gc, weights, normalize_by_r).total for t in episodes]
    total = values[0]
    for v in values[1:]:
        total = total + v
    return nk.scale(total, 1.0 / len(values))
