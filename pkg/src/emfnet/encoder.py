"""Nested (UNet++) encoder grid with cross links, dilated blocks and PCAM.

Node ``(i, j)`` sits at resolution level ``i`` (``H / 2**i``) and grid column
``j``; it exists when ``i + j <= depth - 1``. Column 0 is the plain pooling
backbone. A node in column ``j >= 1`` concatenates, in this order:

* ``skip``       -- every earlier node of its row, ``(i, 0) .. (i, j-1)``
* ``up``         -- ``(i+1, j-1)`` upsampled 2x
* ``cross_down`` -- ``(i-1, j-1)`` max-pooled 2x      (cross-structure only)
* ``cross_up``   -- ``(i+1, j)`` upsampled 2x         (cross-structure only)

``cross_up`` points at the same column, so within a column nodes are
evaluated deepest first.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .layers import ParamInfo, Scope, conv_block, conv_block_params
from .pcam import PcamConfig, pcam_forward, pcam_param_shapes
from .tensor import ShapeError, Tensor, concat_channels, max_pool_2x2, upsample_bilinear_2x

NodeId = tuple[int, int]


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 16
    dilation: int = 2
    use_dilation: bool = True
    use_cross_structure: bool = True
    use_pcam: bool = True
    pcam_paths: int = 4
    max_channels: int = 512
    in_channels: int = 1

    def __post_init__(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.depth < 2:
            out.append(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            out.append(f"base_channels must be positive, got {self.base_channels}")
        if self.dilation < 1:
            out.append(f"dilation must be positive, got {self.dilation}")
        if self.max_channels < self.base_channels:
            out.append("max_channels must be >= base_channels")
        if self.in_channels < 1:
            out.append("in_channels must be positive")
        if self.pcam_paths < 1:
            out.append("pcam_paths must be positive")
        if not out and self.use_pcam:
            c = self.width(self.depth - 1)
            if c % self.pcam_paths or c % 4:
                out.append(
                    f"deepest width {c} must be divisible by 4 and by pcam_paths={self.pcam_paths}"
                )
        return out

    @classmethod
    def desk(cls, **overrides) -> NetworkConfig:
        return cls(**{"depth": 4, "base_channels": 16, **overrides})

    @classmethod
    def full(cls, **overrides) -> NetworkConfig:
        """Seven levels, so the top-row output node is ``(0, 6)``."""
        return cls(**{"depth": 7, "base_channels": 32, **overrides})

    def width(self, level: int) -> int:
        return min(self.base_channels * 2**level, self.max_channels)

    @property
    def conv_dilation(self) -> int:
        return self.dilation if self.use_dilation else 1

    @property
    def pcam(self) -> PcamConfig:
        c = self.width(self.depth - 1)
        return PcamConfig(c, c, self.pcam_paths)

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def check_input(self, h: int, w: int) -> None:
        if h % self.divisor or w % self.divisor:
            raise ShapeError(
                f"input {h}x{w} not divisible by 2**(depth-1) = {self.divisor}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> NetworkConfig:
        return cls(**data)


@dataclass(frozen=True)
class Edge:
    kind: str  # pool | skip | up | cross_down | cross_up
    source: NodeId


@dataclass
class NodeGraph:
    config: NetworkConfig
    inputs: dict[NodeId, list[Edge]] = field(default_factory=dict)
    order: list[NodeId] = field(default_factory=list)

    def width(self, node: NodeId) -> int:
        return self.config.width(node[0])

    def in_channels(self, node: NodeId) -> int:
        if node == (0, 0):
            return self.config.in_channels
        return sum(self.width(e.source) for e in self.inputs[node])

    def final_column(self, level: int) -> NodeId:
        return (level, self.config.depth - 1 - level)


def build_graph(config: NetworkConfig) -> NodeGraph:
    depth = config.depth
    graph = NodeGraph(config)
    exists = lambda i, j: i >= 0 and j >= 0 and i + j <= depth - 1  # noqa: E731
    for i in range(depth):
        graph.order.append((i, 0))
        graph.inputs[(i, 0)] = [Edge("pool", (i - 1, 0))] if i else []
    for j in range(1, depth):
        for i in range(depth - 1 - j, -1, -1):
            edges = [Edge("skip", (i, k)) for k in range(j)]
            edges.append(Edge("up", (i + 1, j - 1)))
            if config.use_cross_structure:
                if exists(i - 1, j - 1):
                    edges.append(Edge("cross_down", (i - 1, j - 1)))
                if exists(i + 1, j):
                    edges.append(Edge("cross_up", (i + 1, j)))
            graph.order.append((i, j))
            graph.inputs[(i, j)] = edges
    seen: set[NodeId] = set()
    for node in graph.order:
        for e in graph.inputs[node]:
            if e.source not in seen:
                raise AssertionError(f"graph order broken: {node} needs {e.source}")
        seen.add(node)
    return graph


def encoder_param_shapes(graph: NodeGraph, prefix: str = "enc.") -> dict[str, ParamInfo]:
    cfg = graph.config
    shapes: dict[str, ParamInfo] = {}
    for node in graph.order:
        i, j = node
        shapes.update(
            conv_block_params(
                f"{prefix}x{i}_{j}", graph.in_channels(node), graph.width(node), cfg.conv_dilation
            )
        )
    if cfg.use_pcam:
        shapes.update(pcam_param_shapes(cfg.pcam, f"{prefix}pcam."))
    return shapes


_RESAMPLE = {
    "pool": max_pool_2x2,
    "cross_down": max_pool_2x2,
    "up": upsample_bilinear_2x,
    "cross_up": upsample_bilinear_2x,
}


def encoder_forward(graph: NodeGraph, x: Tensor, params: Scope) -> dict[NodeId, Tensor]:
    """Evaluate every grid node; returns node -> feature map.

    The tape (if any) is the one the parameter tensors in ``params`` live on.
    """
    cfg = graph.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"encoder: expected Bx{cfg.in_channels}xHxW input, got {x.shape}")
    cfg.check_input(x.shape[2], x.shape[3])
    deepest = (cfg.depth - 1, 0)
    out: dict[NodeId, Tensor] = {}
    for node in graph.order:
        i, j = node
        if node == (0, 0):
            feed = x
        else:
            feed = concat_channels(
                [_RESAMPLE.get(e.kind, _identity)(out[e.source]) for e in graph.inputs[node]]
            )
        h = conv_block(params.sub(f"x{i}_{j}"), feed, graph.width(node), cfg.conv_dilation)
        if node == deepest and cfg.use_pcam:
            h = pcam_forward(h, params.sub("pcam"), cfg.pcam)
        out[node] = h
    return out


def _identity(t: Tensor) -> Tensor:
    return t
