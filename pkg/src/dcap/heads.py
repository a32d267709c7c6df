"""Pooling, attention regressor, nearest-centroid and global classifiers.

Feature maps are channels-last tensors ``(B, h, w, d)``; descriptor ``j`` of an
image is the ``d``-vector at spatial site ``j`` (row-major).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import ShapeError, Tensor

REGRESSOR_HIDDEN = 8


class DegenerateCentroidError(ValueError):
    pass


class EmptyClassError(ValueError):
    pass


def descriptors(maps: Tensor) -> Tensor:
    """``(B, h, w, d) -> (B, r, d)``."""
    if maps.ndim != 4:
        raise ShapeError("descriptors", "expected (B, h, w, d) feature maps", maps.shape)
    b, h, w, d = maps.shape
    return maps.reshape(b, h * w, d)


def gap(maps: Tensor) -> Tensor:
    """Global average pooling: mean of the r descriptors, ``(B, d)``."""
    return nk.global_avg_pool(maps)


@dataclass
class AttentionMap:
    raw: Tensor    # (B, r) sigmoid scores in (0, 1)
    alpha: Tensor  # (B, r) raw / raw.sum(-1)


@dataclass
class AttentionRegressor:
    """Two 1x1 convolutions (2d -> 8 -> 1) with a relu in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def build(cls, d: int, seed: int = 0, hidden: int = REGRESSOR_HIDDEN) -> "AttentionRegressor":
        rng = np.random.default_rng([seed, 0xA7])
        dtype = nk.get_default_dtype()
        b1 = np.sqrt(6.0 / (2 * d))
        b2 = np.sqrt(6.0 / hidden)
        return cls(nk.parameter(rng.uniform(-b1, b1, (2 * d, hidden)).astype(dtype)),
                   nk.parameter(np.zeros(hidden, dtype)),
                   nk.parameter(rng.uniform(-b2, b2, (hidden, 1)).astype(dtype)),
                   nk.parameter(np.zeros(1, dtype)))

    @property
    def in_depth(self) -> int:
        return self.w1.shape[0] // 2

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named(self) -> dict:
        return {"att.w1": self.w1, "att.b1": self.b1, "att.w2": self.w2, "att.b2": self.b2}


def attention_scores(maps: Tensor, reg: AttentionRegressor) -> AttentionMap:
    desc = descriptors(maps)
    b, r, d = desc.shape
    if 2 * d != reg.w1.shape[0]:
        raise ShapeError("attention_scores", f"regressor expects depth {reg.in_depth}, map has {d}",
                         maps.shape, reg.w1.shape)
    pooled = nk.ops.broadcast_to(gap(maps).reshape(b, 1, d), (b, r, d))
    joint = nk.concat([pooled, desc], axis=-1)
    hidden = nk.relu(nk.linear(joint, reg.w1, reg.b1))
    raw = nk.sigmoid(nk.linear(hidden, reg.w2, reg.b2)).reshape(b, r)
    alpha = raw / raw.sum(axis=-1, keepdims=True)
    return AttentionMap(raw, alpha)


def att_pool(maps: Tensor, att: AttentionMap) -> Tensor:
    """Attention-weighted sum of descriptors, ``(B, d)``."""
    desc = descriptors(maps)
    if att.alpha.shape != desc.shape[:2]:
        raise ShapeError("att_pool", "attention does not match descriptor count", att.alpha.shape, desc.shape)
    if np.any(~desc.data.any(axis=(1, 2))):
        warnings.warn("att_pool: all-zero feature map pooled to the zero embedding", RuntimeWarning, stacklevel=2)
    b, r = att.alpha.shape
    return (att.alpha.reshape(b, r, 1) * desc).sum(axis=1)


@dataclass
class Centroids:
    vectors: Tensor  # (N, d)
    class_ids: np.ndarray


def centroids(support: Tensor, labels, n_way: int | None = None) -> Centroids:
    """Per-class mean of support embeddings; labels are episode labels 0..N-1."""
    labels = np.asarray(labels)
    classes = np.arange(n_way) if n_way is not None else np.unique(labels)
    onehot = (labels[None, :] == classes[:, None]).astype(support.dtype)
    counts = onehot.sum(axis=1)
    if np.any(counts == 0):
        missing = classes[counts == 0].tolist()
        raise EmptyClassError(f"no support embeddings for classes {missing}")
    avg = nk.Tensor(onehot / counts[:, None], dtype=support.dtype)
    return Centroids(avg @ support, classes)


def _l2_normalize_rows(c: Tensor) -> Tensor:
    norms = nk.sqrt((c * c).sum(axis=-1, keepdims=True))
    if np.any(norms.data == 0):
        raise DegenerateCentroidError("a class centroid has zero norm")
    return c / norms


def nc_logits(query: Tensor, cents: Centroids) -> Tensor:
    """Dot products of (un-normalized) queries with L2-normalized centroids."""
    unit = _l2_normalize_rows(cents.vectors)
    if query.shape[-1] != unit.shape[-1]:
        raise ShapeError("nc_logits", "embedding depth differs from centroid depth", query.shape, unit.shape)
    return query @ unit.transpose(1, 0)


def tau_logits(query: Tensor, cents: Centroids, similarity: str = "cosine", tau: float = 1.0) -> Tensor:
    """Temperature-scaled similarity logits of the classic prototype classifier."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    c = cents.vectors
    if similarity == "cosine":
        sim = _l2_normalize_rows(query) @ _l2_normalize_rows(c).transpose(1, 0)
    elif similarity == "neg-euclidean":
        # negative squared Euclidean distance
        qq = (query * query).sum(axis=-1, keepdims=True)
        cc = (c * c).sum(axis=-1, keepdims=True).transpose(1, 0)
        sim = nk.scale(query @ c.transpose(1, 0), 2.0) - qq - cc
    else:
        raise ValueError(f"unknown similarity {similarity!r}")
    return nk.scale(sim, 1.0 / tau)


def nc_classify_tau(query: Tensor, cents: Centroids, similarity: str = "cosine", tau: float = 1.0) -> np.ndarray:
    return nk.softmax(tau_logits(query, cents, similarity, tau).data, axis=-1)


@dataclass
class GlobalClassifier:
    weight: Tensor  # (d, C)
    bias: Tensor    # (C,)
    frozen: bool = False

    @classmethod
    def build(cls, d: int, num_classes: int, seed: int = 0) -> "GlobalClassifier":
        rng = np.random.default_rng([seed, 0x6C])
        bound = np.sqrt(6.0 / d)
        dtype = nk.get_default_dtype()
        return cls(nk.parameter(rng.uniform(-bound, bound, (d, num_classes)).astype(dtype)),
                   nk.parameter(np.zeros(num_classes, dtype)))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def freeze(self) -> "GlobalClassifier":
        self.weight.requires_grad = False
        self.bias.requires_grad = False
        self.frozen = True
        return self

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def logits(self, embeddings: Tensor) -> Tensor:
        return nk.linear(embeddings, self.weight, self.bias)


def dense_logits(maps: Tensor, gc: GlobalClassifier) -> Tensor:
    """Global classifier applied to every descriptor independently, ``(B, r, C)``."""
    desc = descriptors(maps)
    if desc.shape[-1] != gc.weight.shape[0]:
        raise ShapeError("dense_logits", "descriptor depth differs from classifier input", desc.shape, gc.weight.shape)
    return gc.logits(desc)
