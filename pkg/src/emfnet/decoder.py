"""Multi-scale decoder: per-level side heads plus a gated refinement stage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .encoder import NetworkConfig, NodeId
from .layers import ParamInfo, Scope, conv, conv_block, conv_block_params, conv_params
from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    max_pool_2x2,
    relu,
    sigmoid,
    upsample_bilinear,
    upsample_bilinear_2x,
)


@dataclass
class SideOutputs:
    """Side logits ``sides[i]`` at ``H/2**i`` and the refined full-size logits."""

    sides: list[Tensor]
    refined: Tensor

    @property
    def logits(self) -> Tensor:
        return self.refined


def decoder_param_shapes(config: NetworkConfig, prefix: str = "dec.") -> dict[str, ParamInfo]:
    depth = config.depth
    shapes: dict[str, ParamInfo] = {}
    for i in range(depth - 2, -1, -1):
        shapes.update(
            conv_block_params(f"{prefix}d{i}", config.width(i + 1) + config.width(i), config.width(i))
        )
    for i in range(depth):
        shapes.update(conv_params(f"{prefix}side{i}", ConvSpec(config.width(i), 1, (1, 1))))
    shapes.update(refine_param_shapes(depth, config.width(0), f"{prefix}refine."))
    return shapes


def refine_param_shapes(n_sides: int, channels: int, prefix: str = "") -> dict[str, ParamInfo]:
    c = channels
    shapes: dict[str, ParamInfo] = {}
    shapes.update(conv_params(f"{prefix}conv1", ConvSpec.same(n_sides + c, c)))
    shapes.update(conv_params(f"{prefix}down", ConvSpec.same(c, c)))
    shapes.update(conv_params(f"{prefix}conv2", ConvSpec.same(c, c)))
    # zero-initialised so that at step 0 the refined logits equal side 0
    shapes.update(conv_params(f"{prefix}head", ConvSpec(c, 1, (1, 1)), zero=True))
    return shapes


def decode(nodes: dict[NodeId, Tensor], params: Scope, config: NetworkConfig) -> SideOutputs:
    depth = config.depth
    finals = [(i, depth - 1 - i) for i in range(depth)]
    missing = [n for n in finals if n not in nodes]
    if missing:
        raise ShapeError(f"decode: missing encoder outputs for nodes {missing}")
    state = nodes[finals[-1]]
    sides: list[Tensor | None] = [None] * depth
    sides[depth - 1] = _side(params, depth - 1, state)
    for i in range(depth - 2, -1, -1):
        skip = nodes[finals[i]]
        fused = concat_channels([upsample_bilinear_2x(state), skip])
        state = conv_block(params.sub(f"d{i}"), fused, config.width(i))
        sides[i] = _side(params, i, state)
    refined = refine(sides, state, params.sub("refine"))
    return SideOutputs(sides, refined)


def _side(params: Scope, level: int, feature: Tensor) -> Tensor:
    return conv(params, f"side{level}", feature, ConvSpec(feature.shape[1], 1, (1, 1)))


def refine(side_outputs: list[Tensor], top_feature: Tensor, params: Scope) -> Tensor:
    """Fuse sigmoid-gated side maps with the top feature map.

    ``z = [up(sigmoid(S_i)) ..., top]``; ``h1 = relu(conv(z))``;
    ``h2 = relu(conv(h1 + up(relu(conv(pool(h1))))))``;
    ``R = S_0 + head(h2)``.
    """
    if not side_outputs:
        raise ShapeError("refine: empty side-output list")
    full = side_outputs[0].shape[2:]
    for k in range(1, len(side_outputs)):
        prev, cur = side_outputs[k - 1].shape[2], side_outputs[k].shape[2]
        if cur >= prev:
            raise ShapeError("refine: side outputs must have strictly decreasing resolution")
    if top_feature.shape[2:] != full:
        raise ShapeError(f"refine: top feature {top_feature.shape} not at resolution {full}")
    gates = [upsample_bilinear(sigmoid(s), full[0] // s.shape[2]) for s in side_outputs]
    z = concat_channels(gates + [top_feature])
    c = top_feature.shape[1]
    h1 = relu(conv(params, "conv1", z, ConvSpec.same(z.shape[1], c)))
    branch = upsample_bilinear_2x(relu(conv(params, "down", max_pool_2x2(h1), ConvSpec.same(c, c))))
    h2 = relu(conv(params, "conv2", add(h1, branch), ConvSpec.same(c, c)))
    return add(side_outputs[0], conv(params, "head", h2, ConvSpec(c, 1, (1, 1))))


def predict_mask(logits: Tensor | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask ``sigmoid(logit) >= threshold`` as uint8."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return (expit(z) >= threshold).astype(np.uint8)
