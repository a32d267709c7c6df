"""Backbone + pooling head + classifiers bundled as one few-shot learner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .backbone import Backbone
from .episodes import Dataset, Episode
from .heads import (AttentionMap, AttentionRegressor, GlobalClassifier, att_pool, attention_scores, centroids, gap,
                    nc_logits)
from .numkit import Tensor
from .objectives import EpisodeTerms

POOLINGS = ("gap", "attpool")


@dataclass
class FewShotModel:
    backbone: Backbone
    classifier: GlobalClassifier | None = None
    regressor: AttentionRegressor | None = None
    pooling: str = "gap"

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.pooling == "attpool" and self.regressor is None:
            raise ValueError("attentive pooling needs an attention regressor")

    def pool(self, maps: Tensor) -> tuple[Tensor, AttentionMap | None]:
        if self.pooling == "gap":
            return gap(maps), None
        att = attention_scores(maps, self.regressor)
        return att_pool(maps, att), att

    def episode_terms(self, images: np.ndarray, episode: Episode, mode: str = "train") -> EpisodeTerms:
        """Forward one episode (support then query in a single batch)."""
        ns = len(episode.support)
        maps = self.backbone.embed(images, mode)
        emb, att = self.pool(maps)
        cents = centroids(emb[:ns], episode.support_labels, episode.way)
        logits = nc_logits(emb[ns:], cents)
        return EpisodeTerms(
            query_logits=logits,
            query_labels=episode.query_labels,
            query_maps=maps[ns:],
            base_labels=episode.query_base,
            alpha=None if att is None else att.alpha[ns:],
            raw=None if att is None else att.raw[ns:],
        )

    def embeddings(self, dataset: Dataset, indices: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode pooled embeddings for the given images, ``(len(indices), d)``."""
        out = []
        with nk.no_grad():
            for i in range(0, len(indices), batch_size):
                maps = self.backbone.embed(dataset.as_float(indices[i:i + batch_size]), "eval")
                out.append(self.pool(maps)[0].data)
        return np.concatenate(out)

    def attention(self, maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw scores and normalized coefficients for plain-array maps."""
        if self.regressor is None:
            raise ValueError("model has no attention regressor")
        with nk.no_grad():
            att = attention_scores(Tensor(maps), self.regressor)
        return att.raw.data, att.alpha.data

    def trainable(self) -> list[Tensor]:
        params = self.backbone.parameters()
        if self.regressor is not None and self.pooling == "attpool":
            params += self.regressor.parameters()
        if self.classifier is not None and not self.classifier.frozen:
            params += self.classifier.parameters()
        return params

    def named_tensors(self) -> dict:
        """Every parameter and buffer as a plain array, in a fixed order."""
        out = {f"theta.{k}": p.data for k, p in self.backbone.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.backbone.buffers.items()})
        if self.regressor is not None:
            out.update({f"phi.{k}": p.data for k, p in self.regressor.named().items()})
        if self.classifier is not None:
            out["classifier.W"] = self.classifier.weight.data
            out["classifier.b"] = self.classifier.bias.data
        return out

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.named_tensors().items()}

    def load_tensors(self, tensors: dict, strict: bool = True) -> None:
        current = self.named_tensors()
        for name, arr in current.items():
            if name not in tensors:
                if strict:
                    raise KeyError(f"missing tensor {name}")
                continue
            src = tensors[name]
            if src.shape != arr.shape:
                raise nk.ShapeError("load", f"tensor {name} has a different shape", src.shape, arr.shape)
            arr[...] = src
