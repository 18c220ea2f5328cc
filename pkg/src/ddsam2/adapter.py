"""Depthwise-dilated adapter and the plain bottleneck MLP adapter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

VARIANTS = ("dd", "mlp", "none")


@dataclass(frozen=True)
class DDAdapterConfig:
    channels: int
    reduction: int = 4
    kernel: int = 3
    dilation_rates: tuple = (1, 3)

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if self.channels < 1 or self.reduction < 1:
            raise ConfigError("channels and reduction must be positive")
        if self.channels % self.reduction:
            raise ConfigError(f"channels {self.channels} not divisible by reduction {self.reduction}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel}")
        rates = self.dilation_rates
        if any(r < 1 for r in rates):
            raise ConfigError(f"dilation rates must be positive, got {rates}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"dilation rates must be strictly increasing, got {rates}")

    @property
    def hidden(self):
        return self.channels // self.reduction

    @property
    def n_branches(self):
        return len(self.dilation_rates)


@dataclass
class AdapterParams:
    down_w: T.Tensor
    down_b: T.Tensor
    up_w: T.Tensor
    up_b: T.Tensor
    branches: list = field(default_factory=list)  # [(w [C/p,k,k], b [C/p])] per rate

    def named(self, prefix=""):
        yield prefix + "down.w", self.down_w
        yield prefix + "down.b", self.down_b
        for i, (w, b) in enumerate(self.branches):
            yield f"{prefix}branches.{i}.w", w
            yield f"{prefix}branches.{i}.b", b
        yield prefix + "up.w", self.up_w
        yield prefix + "up.b", self.up_b

    @classmethod
    def from_state(cls, params, prefix, n_branches):
        branches = [(params[f"{prefix}branches.{i}.w"], params[f"{prefix}branches.{i}.b"])
                    for i in range(n_branches)]
        return cls(params[prefix + "down.w"], params[prefix + "down.b"],
                   params[prefix + "up.w"], params[prefix + "up.b"], branches)

    def count(self):
        return sum(t.size for _, t in self.named())


def init_adapter(cfg, rng, variant="dd"):
    """Down-projection and branches uniform in +-1/sqrt(fan_in); up-projection zero."""
    c, hid, k = cfg.channels, cfg.hidden, cfg.kernel

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return T.Tensor(rng.uniform(-bound, bound, size=shape))

    branches = []
    if variant == "dd":
        for _ in cfg.dilation_rates:
            branches.append((uniform((hid, k, k), k * k), uniform((hid,), k * k)))
    elif variant != "mlp":
        raise ConfigError(f"no adapter parameters for variant {variant!r}")
    return AdapterParams(
        down_w=uniform((hid, c), c),
        down_b=uniform((hid,), c),
        up_w=T.Tensor(np.zeros((c, hid))),
        up_b=T.Tensor(np.zeros(c)),
        branches=branches,
    )


def _check(f_i, p, cfg):
    if f_i.data.ndim != 4 or f_i.dims[1] != cfg.channels:
        raise ShapeError(f"adapter expects {cfg.channels} channels, got input dims {f_i.dims}")
    if p.down_w.dims != (cfg.hidden, cfg.channels):
        raise ShapeError(f"adapter down weight dims {p.down_w.dims} != {(cfg.hidden, cfg.channels)}")


def dd_adapter_forward(f_i, p, cfg):
    _check(f_i, p, cfg)
    if len(p.branches) != cfg.n_branches:
        raise ShapeError(f"{len(p.branches)} branch parameter sets for {cfg.n_branches} rates")
    f_d = T.gelu(T.conv2d_pointwise(f_i, p.down_w, p.down_b))
    f_m = f_d
    for (w, b), rate in zip(p.branches, cfg.dilation_rates):
        f_m = f_m + T.gelu(T.conv2d_depthwise(f_d, w, b, dilation=rate))
    return f_i + T.gelu(T.conv2d_pointwise(f_m, p.up_w, p.up_b))


def std_adapter_forward(f_i, p, cfg):
    _check(f_i, p, cfg)
    hidden = T.gelu(T.conv2d_pointwise(f_i, p.down_w, p.down_b))
    return f_i + T.gelu(T.conv2d_pointwise(hidden, p.up_w, p.up_b))


def param_count(cfg):
    c, hid, k = cfg.channels, cfg.hidden, cfg.kernel
    return (c * hid + hid) + cfg.n_branches * (k * k * hid + hid) + (hid * c + c)


def flop_count(cfg, h, w):
    """Multiply-accumulates of one adapter over an h x w map, biases and GELU excluded."""
    c, hid, k = cfg.channels, cfg.hidden, cfg.kernel
    return h * w * (c * hid + cfg.n_branches * k * k * hid + hid * c)
