from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emfnet import tensor as T
from oracles import dilate_kernel, naive_conv2d


def conv_np(x, w, b, spec):
    return T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), spec).data


# ---------------------------------------------------------------------------
# conv2d


def test_conv_all_ones_padding_one():
    spec = T.ConvSpec(1, 1, (3, 3), padding=(1, 1))
    out = conv_np(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), spec)
    np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    out = conv_np(x, np.ones((1, 1, 1, 1)), np.zeros(1), T.ConvSpec(1, 1, (1, 1)))
    np.testing.assert_array_equal(out, x)


def test_conv_dilated_shape():
    spec = T.ConvSpec(1, 1, (3, 3), padding=(2, 2), dilation=2)
    assert spec.output_size(5, 5) == (5, 5)
    assert conv_np(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1), spec).shape == (1, 1, 5, 5)


def test_conv_same_padding():
    assert T.ConvSpec.same(2, 3, 3, dilation=3).padding == (3, 3)


def test_conv_shape_errors(rng):
    spec = T.ConvSpec(2, 1, (3, 3))
    with pytest.raises(T.ShapeError, match="channel|weight|input"):
        conv_np(rng.standard_normal((1, 3, 5, 5)), rng.standard_normal((1, 2, 3, 3)), np.zeros(1), spec)
    with pytest.raises(ValueError):
        T.ConvSpec(1, 1, (5, 5)).output_size(3, 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_conv_non_finite_names_op():
    x = np.full((1, 1, 3, 3), 1e308)
    with pytest.raises(T.NumericError, match="conv2d"):
        conv_np(x, np.full((1, 1, 3, 3), 1e308), np.zeros(1), T.ConvSpec(1, 1, (3, 3)))


conv_configs = st.builds(
    dict,
    b=st.integers(1, 2),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    k=st.integers(1, 5),
    stride=st.integers(1, 2),
    pad=st.integers(0, 3),
    d=st.integers(1, 3),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    seed=st.integers(0, 2**31),
)


def _random_conv(c):
    extent = c["d"] * (c["k"] - 1) + 1
    h = max(c["h"], extent - 2 * c["pad"])
    w = max(c["w"], extent - 2 * c["pad"])
    r = np.random.default_rng(c["seed"])
    x = r.standard_normal((c["b"], c["cin"], h, w))
    wt = r.standard_normal((c["cout"], c["cin"], c["k"], c["k"]))
    bias = r.standard_normal(c["cout"])
    spec = T.ConvSpec(c["cin"], c["cout"], (c["k"], c["k"]), (c["stride"],) * 2, (c["pad"],) * 2, c["d"])
    return x, wt, bias, spec


@given(conv_configs)
def test_conv_matches_naive_loops(c):
    x, w, b, spec = _random_conv(c)
    ref = naive_conv2d(x, w, b, spec.stride, spec.padding, spec.dilation)
    np.testing.assert_allclose(conv_np(x, w, b, spec), ref, rtol=0, atol=1e-10)


@given(conv_configs)
def test_dilation_equals_zero_inserted_kernel(c):
    x, w, b, spec = _random_conv(c)
    big = dilate_kernel(w, spec.dilation)
    plain = T.ConvSpec(spec.in_channels, spec.out_channels, big.shape[2:], spec.stride, spec.padding, 1)
    np.testing.assert_allclose(conv_np(x, w, b, spec), conv_np(x, big, b, plain), rtol=0, atol=1e-12)


@given(conv_configs, st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(c, a, s):
    x, w, _, spec = _random_conv(c)
    y = np.random.default_rng(c["seed"] + 1).standard_normal(x.shape)
    zero = np.zeros(spec.out_channels)
    lhs = conv_np(a * x + s * y, w, zero, spec)
    rhs = a * conv_np(x, w, zero, spec) + s * conv_np(y, w, zero, spec)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


# ---------------------------------------------------------------------------
# batch norm


def test_bn_train_normalises(rng):
    x = rng.standard_normal((3, 4, 5, 5)) * 5 + 2
    state = T.BatchNormState.fresh(4)
    y = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), state).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-6)
    assert state.tracked == 1


def test_bn_constant_channel_gives_beta():
    state = T.BatchNormState.fresh(1)
    y = T.batch_norm(T.Tensor(np.full((2, 1, 3, 3), 7.0)), T.Tensor([1.0]), T.Tensor([5.0]), state).data
    np.testing.assert_array_equal(y, 5.0)


def test_bn_two_elements():
    state = T.BatchNormState.fresh(1)
    y = T.batch_norm(T.Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2)), T.Tensor([1.0]), T.Tensor([0.0]), state)
    expected = 1 / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(y.data.ravel(), [-expected, expected], rtol=0, atol=1e-15)


def test_bn_running_stats_and_eval(rng):
    state = T.BatchNormState.fresh(2)
    x = rng.standard_normal((4, 2, 3, 3))
    T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), state)
    n = 4 * 9
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    y = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), state, train=False).data
    ref = (x - state.running_mean[None, :, None, None]) / np.sqrt(state.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y, ref)


def test_bn_errors():
    with pytest.raises(T.ShapeError, match="eval mode"):
        T.batch_norm(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor([1.0]), T.Tensor([0.0]), T.BatchNormState.fresh(1), train=False)
    with pytest.raises(T.ShapeError, match="channels"):
        T.batch_norm(T.Tensor(np.zeros((1, 2, 2, 2))), T.Tensor([1.0]), T.Tensor([0.0]), T.BatchNormState.fresh(1))
    with pytest.raises(T.ShapeError, match="at least 2"):
        T.batch_norm(T.Tensor(np.zeros((1, 1, 1, 1))), T.Tensor([1.0]), T.Tensor([0.0]), T.BatchNormState.fresh(1))


# ---------------------------------------------------------------------------
# pointwise and resampling


def test_relu_and_sigmoid():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5


def test_upsample_constant():
    y = T.upsample_bilinear_2x(T.Tensor(np.full((1, 2, 3, 5), 4.25))).data
    assert y.shape == (1, 2, 6, 10)
    np.testing.assert_array_equal(y, 4.25)


def test_upsample_align_corners_false():
    # 1-D ramp [0, 1] -> sample positions -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
    m = T.bilinear_matrix(2, 2)
    np.testing.assert_allclose(m @ np.array([0.0, 1.0]), [0.0, 0.25, 0.75, 1.0])


def test_max_pool():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(T.max_pool_2x2(T.Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
    with pytest.raises(T.ShapeError, match="even"):
        T.max_pool_2x2(T.Tensor(np.zeros((1, 1, 3, 4))))


def test_concat_errors():
    with pytest.raises(T.ShapeError):
        T.concat_channels([T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 2)))])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31))
def test_concat_split_roundtrip(widths, seed):
    r = np.random.default_rng(seed)
    parts = [T.Tensor(r.standard_normal((2, c, 3, 2))) for c in widths]
    back = T.split_channels(T.concat_channels(parts), widths)
    for a, b in zip(parts, back):
        np.testing.assert_array_equal(a.data, b.data)


def test_tensor_is_read_only():
    t = T.Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


# ---------------------------------------------------------------------------
# tape and backward


def test_backward_sigmoid_at_zero():
    tape = T.Tape()
    x = tape.leaf(np.zeros((2, 3)))
    g = T.backward(tape, T.sum_all(T.sigmoid(x)))
    np.testing.assert_array_equal(g[x], 0.25)


def test_backward_square(rng):
    tape = T.Tape()
    v = rng.standard_normal((3, 4))
    x = tape.leaf(v)
    g = T.backward(tape, T.sum_all(T.mul(x, x)))
    np.testing.assert_allclose(g[x], 2 * v)


def test_backward_fan_out_accumulates():
    tape = T.Tape()
    x = tape.leaf(np.array([1.5, -2.0]))
    y = T.add(T.scale(x, 3.0), T.scale(x, 4.0))
    np.testing.assert_array_equal(T.backward(tape, T.sum_all(y))[x], 7.0)


def test_unreached_leaf_gets_zero():
    tape = T.Tape()
    x = tape.leaf(np.ones(2))
    y = tape.leaf(np.ones(3))
    g = T.backward(tape, T.sum_all(x))
    np.testing.assert_array_equal(g[y], 0.0)


def test_backward_errors():
    tape = T.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(T.BackwardError, match="scalar"):
        T.backward(tape, T.relu(x))
    with pytest.raises(T.BackwardError, match="tape"):
        T.backward(T.Tape(), T.sum_all(x))
    root = T.emit("no_such_op", np.array(1.0), (x,))
    with pytest.raises(T.BackwardError, match="no_such_op"):
        T.backward(tape, root)


def test_mixed_tapes_rejected():
    a = T.Tape().leaf(np.ones(2))
    b = T.Tape().leaf(np.ones(2))
    with pytest.raises(Exception, match="tape"):
        T.add(a, b)


def test_tape_is_topological_and_reusable(rng):
    tape = T.Tape()
    x = tape.leaf(rng.standard_normal((1, 2, 4, 4)))
    root = T.sum_all(T.upsample_bilinear_2x(T.max_pool_2x2(T.relu(x))))
    for i, node in enumerate(tape.nodes):
        assert all(p is None or p < i for p in node.parents)
    g1 = T.backward(tape, root)
    g2 = T.backward(tape, root)
    np.testing.assert_array_equal(g1[x], g2[x])


def test_backward_visits_in_reverse_insertion_order(monkeypatch):
    seen = []
    original = T.BACKWARD_RULES["scale"]

    def spy(ctx, g):
        seen.append(ctx)
        return original(ctx, g)

    monkeypatch.setitem(T.BACKWARD_RULES, "scale", spy)
    tape = T.Tape()
    x = tape.leaf(np.ones(2))
    a = T.scale(x, 1.0)
    b = T.scale(x, 2.0)
    c = T.scale(T.add(a, b), 3.0)
    T.backward(tape, T.sum_all(c))
    assert seen == [3.0, 2.0, 1.0]
