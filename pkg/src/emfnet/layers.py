"""Parameter bookkeeping shared by the encoder, PCAM and decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import BatchNormState, ConvSpec, Tensor, batch_norm, conv2d, relu


@dataclass(frozen=True)
class ParamInfo:
    shape: tuple[int, ...]
    init: str  # "fan_in", "zeros" or "ones"
    fan_in: int = 1


def conv_params(name: str, spec: ConvSpec, zero: bool = False) -> dict[str, ParamInfo]:
    kh, kw = spec.kernel
    fan_in = spec.in_channels * kh * kw
    return {
        f"{name}.weight": ParamInfo(
            (spec.out_channels, spec.in_channels, kh, kw), "zeros" if zero else "fan_in", fan_in
        ),
        f"{name}.bias": ParamInfo((spec.out_channels,), "zeros", fan_in),
    }


def bn_params(name: str, channels: int) -> dict[str, ParamInfo]:
    return {
        f"{name}.gamma": ParamInfo((channels,), "ones"),
        f"{name}.beta": ParamInfo((channels,), "zeros"),
    }


def bn_layers(shapes: Mapping[str, ParamInfo]) -> dict[str, int]:
    """Batch-norm layer name -> channel count, read off the ``.gamma`` entries."""
    return {k[: -len(".gamma")]: v.shape[0] for k, v in shapes.items() if k.endswith(".gamma")}


def init_params(shapes: Mapping[str, ParamInfo], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform +-sqrt(1/fan_in) for conv weights, zeros/ones otherwise."""
    out = {}
    for name, info in shapes.items():
        if info.init == "fan_in":
            bound = np.sqrt(1.0 / info.fan_in)
            out[name] = rng.uniform(-bound, bound, size=info.shape)
        elif info.init == "zeros":
            out[name] = np.zeros(info.shape)
        elif info.init == "ones":
            out[name] = np.ones(info.shape)
        else:
            raise ValueError(f"unknown init {info.init!r} for {name}")
    return out


class Scope:
    """Prefixed view over a flat parameter mapping plus batch-norm states."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        states: Mapping[str, BatchNormState],
        train: bool = True,
        prefix: str = "",
    ):
        self.params = params
        self.states = states
        self.train = train
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        key = self.prefix + name
        try:
            return self.params[key]
        except KeyError:
            raise KeyError(f"missing parameter {key!r}") from None

    def state(self, name: str) -> BatchNormState:
        return self.states[self.prefix + name]

    def sub(self, name: str) -> Scope:
        return Scope(self.params, self.states, self.train, f"{self.prefix}{name}.")


def conv(scope: Scope, name: str, x: Tensor, spec: ConvSpec) -> Tensor:
    return conv2d(x, scope[f"{name}.weight"], scope[f"{name}.bias"], spec)


def bn(scope: Scope, name: str, x: Tensor) -> Tensor:
    return batch_norm(x, scope[f"{name}.gamma"], scope[f"{name}.beta"], scope.state(name), scope.train)


def conv_block_params(name: str, cin: int, cout: int, dilation: int = 1) -> dict[str, ParamInfo]:
    out = {}
    out.update(conv_params(f"{name}.conv1", ConvSpec.same(cin, cout, 3, dilation)))
    out.update(bn_params(f"{name}.bn1", cout))
    out.update(conv_params(f"{name}.conv2", ConvSpec.same(cout, cout, 3, dilation)))
    out.update(bn_params(f"{name}.bn2", cout))
    return out


def conv_block(scope: Scope, x: Tensor, cout: int, dilation: int = 1) -> Tensor:
    """Two 3x3 conv -> BN -> ReLU layers at unchanged resolution."""
    h = relu(bn(scope, "bn1", conv(scope, "conv1", x, ConvSpec.same(x.shape[1], cout, 3, dilation))))
    return relu(bn(scope, "bn2", conv(scope, "conv2", h, ConvSpec.same(cout, cout, 3, dilation))))
