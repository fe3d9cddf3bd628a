"""Parallel convolutional attention module.

``x -> N parallel BN(ReLU(conv3x3)) paths -> concat -> dilated 3x3 -> 1x1``
gives the context map; a 1x1 bottleneck (C_out/4) and sigmoid give a full
``C_out x H x W`` attention map that gates the context map elementwise.
"""
from __future__ import annotations

from dataclasses import dataclass

from .layers import ParamInfo, Scope, bn, bn_params, conv, conv_params
from .tensor import ConvSpec, ShapeError, Tensor, concat_channels, mul, relu, sigmoid


@dataclass(frozen=True)
class PcamConfig:
    in_channels: int
    out_channels: int
    paths: int = 4

    def __post_init__(self) -> None:
        if min(self.in_channels, self.out_channels, self.paths) < 1:
            raise ValueError("PCAM channel and path counts must be positive")
        if self.out_channels % self.paths:
            raise ValueError(
                f"PCAM out_channels={self.out_channels} not divisible by paths={self.paths}"
            )
        if self.out_channels % 4:
            raise ValueError(f"PCAM out_channels={self.out_channels} not divisible by 4")

    @property
    def path_channels(self) -> int:
        return self.out_channels // self.paths

    @property
    def bottleneck(self) -> int:
        return self.out_channels // 4


def _path_spec(cfg: PcamConfig) -> ConvSpec:
    return ConvSpec.same(cfg.in_channels, cfg.path_channels, 3)


def pcam_param_shapes(cfg: PcamConfig, prefix: str = "") -> dict[str, ParamInfo]:
    c = cfg.out_channels
    shapes: dict[str, ParamInfo] = {}
    for i in range(cfg.paths):
        shapes.update(conv_params(f"{prefix}path{i}.conv", _path_spec(cfg)))
        shapes.update(bn_params(f"{prefix}path{i}.bn", cfg.path_channels))
    shapes.update(conv_params(f"{prefix}agg.dilated", ConvSpec.same(c, c, 3, dilation=2)))
    shapes.update(conv_params(f"{prefix}agg.point", ConvSpec(c, c, (1, 1))))
    shapes.update(conv_params(f"{prefix}att.reduce", ConvSpec(c, cfg.bottleneck, (1, 1))))
    shapes.update(conv_params(f"{prefix}att.expand", ConvSpec(cfg.bottleneck, c, (1, 1))))
    return shapes


def pcam_paths(x: Tensor, params: Scope, cfg: PcamConfig) -> list[Tensor]:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"pcam: expected Bx{cfg.in_channels}xHxW input, got {x.shape}")
    spec = _path_spec(cfg)
    return [
        bn(params, f"path{i}.bn", relu(conv(params, f"path{i}.conv", x, spec)))
        for i in range(cfg.paths)
    ]


def pcam_aggregate(paths: list[Tensor], params: Scope) -> Tensor:
    if not paths:
        raise ShapeError("pcam_aggregate: no paths")
    if any(p.shape != paths[0].shape for p in paths):
        raise ShapeError(f"pcam_aggregate: ragged path shapes {[p.shape for p in paths]}")
    cat = concat_channels(paths)
    c = cat.shape[1]
    wide = conv(params, "agg.dilated", cat, ConvSpec.same(c, c, 3, dilation=2))
    return conv(params, "agg.point", wide, ConvSpec(c, c, (1, 1)))


def pcam_attention(f_ctx: Tensor, params: Scope) -> Tensor:
    c = f_ctx.shape[1]
    if c % 4:
        raise ShapeError(f"pcam_attention: {c} channels not divisible by 4")
    squeezed = relu(conv(params, "att.reduce", f_ctx, ConvSpec(c, c // 4, (1, 1))))
    return sigmoid(conv(params, "att.expand", squeezed, ConvSpec(c // 4, c, (1, 1))))


def pcam_forward(x: Tensor, params: Scope, cfg: PcamConfig) -> Tensor:
    f_ctx = pcam_aggregate(pcam_paths(x, params, cfg), params)
    return mul(f_ctx, pcam_attention(f_ctx, params))
