from __future__ import annotations

import numpy as np
import pytest

from emfnet import tensor as T
from emfnet.encoder import NetworkConfig, build_graph, encoder_forward, encoder_param_shapes
from emfnet.gradcheck import Case, check_case
from emfnet.layers import Scope, conv_block
from emfnet.network import SegmentationNet
from oracles import plain_unetpp_nodes, unetpp_edges


def edge_set(graph):
    return sorted((node, e.source, e.kind) for node in graph.order for e in graph.inputs[node])


def test_config_reports_all_problems():
    with pytest.raises(ValueError) as info:
        NetworkConfig(depth=1, base_channels=0, dilation=0)
    msg = str(info.value)
    assert "depth" in msg and "base_channels" in msg and "dilation" in msg


def test_config_presets_and_widths():
    assert NetworkConfig.desk().depth == 4
    full = NetworkConfig.full()
    assert full.depth == 7
    assert build_graph(full).final_column(0) == (0, 6)
    assert NetworkConfig(depth=7, base_channels=32).width(6) == 512
    assert NetworkConfig(depth=7, base_channels=64).width(6) == 512


def test_config_pcam_divisibility():
    with pytest.raises(ValueError, match="pcam_paths"):
        NetworkConfig(depth=2, base_channels=3, pcam_paths=4)
    NetworkConfig(depth=2, base_channels=3, use_pcam=False)


def test_config_dict_roundtrip():
    cfg = NetworkConfig(depth=3, base_channels=8, use_cross_structure=False)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_smallest_grid():
    g = build_graph(NetworkConfig(depth=2, base_channels=4))
    assert sorted(g.order) == [(0, 0), (0, 1), (1, 0)]
    assert [(e.kind, e.source) for e in g.inputs[(0, 1)]] == [("skip", (0, 0)), ("up", (1, 0))]


def test_cross_edges_at_depth_three():
    g = build_graph(NetworkConfig(depth=3, base_channels=4))
    assert ("cross_down", (0, 0)) in [(e.kind, e.source) for e in g.inputs[(1, 1)]]
    # the same-column upward link into X^{0,1} comes from X^{1,1}
    assert ("cross_up", (1, 1)) in [(e.kind, e.source) for e in g.inputs[(0, 1)]]
    # X^{1,0} is already an input of X^{0,1} through the ordinary up edge
    assert ("up", (1, 0)) in [(e.kind, e.source) for e in g.inputs[(0, 1)]]


@pytest.mark.parametrize("depth", [2, 3, 4, 5])
def test_cross_off_is_canonical_unetpp(depth):
    g = build_graph(NetworkConfig(depth=depth, base_channels=4, use_cross_structure=False))
    assert edge_set(g) == unetpp_edges(depth)


@pytest.mark.parametrize("depth", [2, 3, 4, 5, 7])
def test_graph_is_topological_and_channel_counts_add_up(depth):
    cfg = NetworkConfig(depth=depth, base_channels=4)
    g = build_graph(cfg)
    seen = set()
    for node in g.order:
        assert all(e.source in seen for e in g.inputs[node])
        seen.add(node)
        if node != (0, 0):
            assert g.in_channels(node) == sum(cfg.width(e.source[0]) for e in g.inputs[node])
    assert seen == {(i, j) for i in range(depth) for j in range(depth - i)}
    shapes = encoder_param_shapes(g)
    for i, j in g.order:
        assert shapes[f"enc.x{i}_{j}.conv1.weight"].shape[1] == g.in_channels((i, j))


def test_node_shapes(rng):
    net = SegmentationNet(NetworkConfig(depth=3, base_channels=8), 0)
    nodes = net.encode(rng.random((1, 1, 32, 32)))
    assert nodes[(2, 0)].shape == (1, 32, 8, 8)
    assert nodes[(0, 2)].shape == (1, 8, 32, 32)
    for (i, j), t in nodes.items():
        assert t.shape == (1, 8 * 2**i, 32 >> i, 32 >> i)


def test_indivisible_input_rejected(rng):
    net = SegmentationNet(NetworkConfig(depth=3, base_channels=8), 0)
    with pytest.raises(T.ShapeError, match="divisible"):
        net.encode(rng.random((1, 1, 30, 32)))


def _scope(net, train=True):
    return Scope({k: T.Tensor(v) for k, v in net.params.items()}, net.bn_states, train).sub("enc")


def test_pcam_off_leaves_raw_block(rng):
    on = SegmentationNet(NetworkConfig(depth=3, base_channels=8), 0)
    off = SegmentationNet(NetworkConfig(depth=3, base_channels=8, use_pcam=False), 0)
    for k in off.params:
        off.params[k] = on.params[k]
    x = rng.random((2, 1, 16, 16))
    scope = _scope(on)
    h = T.Tensor(x)
    for i in range(3):
        h = conv_block(scope.sub(f"x{i}_0"), h if i == 0 else T.max_pool_2x2(h), 8 * 2**i, 2)
    np.testing.assert_array_equal(off.encode(x)[(2, 0)].data, h.data)
    assert not np.array_equal(on.encode(x)[(2, 0)].data, h.data)


@pytest.mark.parametrize("use_pcam", [False, True])
def test_ablation_containment_bit_identical(rng, use_pcam):
    cfg = NetworkConfig(depth=4, base_channels=4, use_cross_structure=False, use_dilation=False, use_pcam=use_pcam)
    net = SegmentationNet(cfg, 3)
    x = T.Tensor(rng.random((2, 1, 16, 16)))
    ours = encoder_forward(net.graph, x, _scope(net))
    ref = plain_unetpp_nodes(cfg, x, _scope(net))
    assert ours.keys() == ref.keys()
    for node in ours:
        assert np.array_equal(ours[node].data, ref[node].data), node


def test_dilation_changes_receptive_field(rng):
    a = SegmentationNet(NetworkConfig(depth=2, base_channels=4, use_pcam=False), 0)
    b = SegmentationNet(NetworkConfig(depth=2, base_channels=4, use_pcam=False, use_dilation=False), 0)
    assert a.shapes.keys() == b.shapes.keys()
    x = rng.random((1, 1, 8, 8))
    assert not np.allclose(a.encode(x)[(0, 1)].data, b.encode(x)[(0, 1)].data)


def test_encoder_gradients_match_finite_differences(rng):
    net = SegmentationNet(NetworkConfig(depth=3, base_channels=4, pcam_paths=2), rng)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in net.params.items() if k.startswith("enc.")}
    x = rng.random((2, 1, 8, 8))
    weights = {n: rng.standard_normal((2, 4 * 2**n[0], 8 >> n[0], 8 >> n[0])) for n in net.graph.order}

    def build(t):
        nodes = encoder_forward(net.graph, T.Tensor(x), Scope(t, net.bn_states, True).sub("enc"))
        return T.add_scalars([T.mean_all(T.mul(v, T.Tensor(weights[n]))) for n, v in nodes.items()])

    result = check_case(Case("encoder", build, params, samples=1), rng)
    assert result.error < 1e-4, result
