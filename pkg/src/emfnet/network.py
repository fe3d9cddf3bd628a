"""Full segmentation network: encoder grid + multi-scale decoder."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .decoder import SideOutputs, decode, decoder_param_shapes
from .encoder import NetworkConfig, NodeGraph, build_graph, encoder_forward, encoder_param_shapes
from .layers import ParamInfo, Scope, bn_layers, init_params
from .tensor import BatchNormState, Tape, Tensor


class SegmentationNet:
    """Parameters, batch-norm state and forward pass for one configuration.

    ``params`` maps dotted names to float64 arrays. They are plain arrays so the
    optimiser can update them in place; each forward call wraps them either as
    constants or as leaves of a tape.
    """

    def __init__(self, config: NetworkConfig, rng: np.random.Generator | int | None = 0):
        self.config = config
        self.graph: NodeGraph = build_graph(config)
        self.shapes: dict[str, ParamInfo] = {
            **encoder_param_shapes(self.graph),
            **decoder_param_shapes(config),
        }
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.params: dict[str, np.ndarray] = init_params(self.shapes, rng)
        self.bn_states: dict[str, BatchNormState] = {
            name: BatchNormState.fresh(c) for name, c in bn_layers(self.shapes).items()
        }

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.leaf(arr) for name, arr in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        return {name: Tensor._wrap(arr.copy()) for name, arr in self.params.items()}

    def forward(
        self,
        images: np.ndarray | Tensor,
        params: Mapping[str, Tensor] | None = None,
        train: bool = True,
    ) -> SideOutputs:
        if params is None:
            params = self.constants()
        x = images if isinstance(images, Tensor) else Tensor(images)
        scope = Scope(params, self.bn_states, train)
        nodes = encoder_forward(self.graph, x, scope.sub("enc"))
        return decode(nodes, scope.sub("dec"), self.config)

    def encode(self, images: np.ndarray, params: Mapping[str, Tensor] | None = None, train: bool = True):
        if params is None:
            params = self.constants()
        scope = Scope(params, self.bn_states, train)
        return encoder_forward(self.graph, Tensor(images), scope.sub("enc"))

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode refined logits (running batch-norm statistics)."""
        return self.forward(images, train=False).refined.data
