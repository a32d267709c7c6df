"""Embedding networks mapping image batches to channels-last feature maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .numkit import ShapeError, Tensor

CONV4_VARIANTS = {
    "conv4-32": (32, 32, 32, 32),
    "conv4-64": (64, 64, 64, 64),
    "conv4-128": (64, 64, 128, 128),
    "conv4-256": (64, 96, 128, 256),
}


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    family: str = "conv4"
    filters: tuple = (32, 32, 32, 32)
    input_size: int = 64
    channels_in: int = 1
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.family not in ("conv4", "resnet"):
            raise ConfigError(f"unknown backbone family {self.family!r}")
        if len(self.filters) != 4 or any(f <= 0 for f in self.filters):
            raise ConfigError(f"filters must be four positive integers, got {self.filters}")
        if self.input_size < 16:
            raise ConfigError(f"input_size must be at least 16 (four 2x2 poolings), got {self.input_size}")
        if self.channels_in <= 0:
            raise ConfigError("channels_in must be positive")

    @property
    def depth(self) -> int:
        return self.filters[-1]

    @property
    def map_size(self) -> int:
        """Spatial extent after four floor-halving poolings (84 -> 5, 64 -> 4)."""
        s = self.input_size
        for _ in range(4):
            s //= 2
        return s


@dataclass
class FeatureMap:
    """One image's ``h x w x d`` activation block, read as ``r = h*w`` descriptors."""

    values: np.ndarray  # (h, w, d)

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def r(self) -> int:
        return self.h * self.w

    def descriptors(self) -> np.ndarray:
        """``(r, d)``; row ``j`` is spatial site ``j`` in row-major order."""
        return self.values.reshape(self.r, self.d)


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config: BackboneConfig, seed: int = 0) -> "Backbone":
        net = cls(config)
        rng = np.random.default_rng([seed, 0xBB])
        cin = config.channels_in
        for b, cout in enumerate(config.filters):
            if config.family == "conv4":
                net._add_conv(rng, f"block{b}.conv", 3, cin, cout, bias=True)
                net._add_bn(f"block{b}.bn", cout)
            else:
                c = cin
                for k in range(3):
                    net._add_conv(rng, f"block{b}.conv{k}", 3, c, cout, bias=False)
                    net._add_bn(f"block{b}.bn{k}", cout)
                    c = cout
                net._add_conv(rng, f"block{b}.proj", 1, cin, cout, bias=False)
                net._add_bn(f"block{b}.proj_bn", cout)
            cin = cout
        return net

    def _add_conv(self, rng, name: str, k: int, cin: int, cout: int, bias: bool) -> None:
        dtype = nk.get_default_dtype()
        self.params[f"{name}.weight"] = nk.parameter(_uniform_fan_in(rng, (k, k, cin, cout), k * k * cin).astype(dtype))
        if bias:
            self.params[f"{name}.bias"] = nk.parameter(np.zeros(cout, dtype=dtype))

    def _add_bn(self, name: str, c: int) -> None:
        dtype = nk.get_default_dtype()
        self.params[f"{name}.gamma"] = nk.parameter(np.ones(c, dtype=dtype))
        self.params[f"{name}.beta"] = nk.parameter(np.zeros(c, dtype=dtype))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _conv(self, x: Tensor, name: str, pad: int) -> Tensor:
        return nk.conv2d(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"), pad=pad)

    def _bn(self, x: Tensor, name: str, training: bool) -> Tensor:
        return nk.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
                             training=training, momentum=self.config.bn_momentum)

    def embed(self, images, mode: str = "eval") -> Tensor:
        """Images ``(N, S, S, C)`` -> feature maps ``(N, m, m, d)`` with ``m = config.map_size``."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        x = images if isinstance(images, Tensor) else Tensor(images)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.input_size, cfg.input_size, cfg.channels_in):
            raise ShapeError("embed", f"expected images of shape (N, {cfg.input_size}, {cfg.input_size}, "
                             f"{cfg.channels_in})", x.shape)
        for b in range(4):
            if cfg.family == "conv4":
                x = nk.relu(self._bn(self._conv(x, f"block{b}.conv", 1), f"block{b}.bn", training))
            else:
                shortcut = self._bn(self._conv(x, f"block{b}.proj", 0), f"block{b}.proj_bn", training)
                h = x
                for k in range(3):
                    h = self._bn(self._conv(h, f"block{b}.conv{k}", 1), f"block{b}.bn{k}", training)
                    if k < 2:
                        h = nk.relu(h)
                x = nk.relu(h + shortcut)
            x = nk.max_pool2d(x, 2)
        return x

    def feature_maps(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode maps as a plain array, computed in chunks without a graph."""
        out = []
        for i in range(0, len(images), batch_size):
            with nk.no_grad():
                out.append(self.embed(images[i:i + batch_size], "eval").data)
        return np.concatenate(out) if out else np.zeros((0,), dtype=nk.get_default_dtype())


def build_backbone(config: BackboneConfig, rng_seed: int = 0) -> Backbone:
    return Backbone.build(config, rng_seed)
