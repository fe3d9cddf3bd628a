"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`. When
any input lives on a :class:`Tape`, the result is appended to that tape along
with the name of its backward rule and whatever forward context the rule
needs. :func:`backward` then walks the tape in reverse insertion order.

Layout is row-major ``B x C x H x W`` for image data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand extents are incompatible with the op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class BackwardError(RuntimeError):
    """The tape cannot be differentiated as requested."""


# ---------------------------------------------------------------------------
# core types


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data: Any, tape: Tape | None = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Tape | None = None, node: int | None = None) -> Tensor:
        # internal constructor: takes ownership of ``arr`` without copying
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
            arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, scale(other, -1.0))


@dataclass
class Node:
    value: np.ndarray
    parents: tuple[int | None, ...]
    rule: str | None
    ctx: Any = None


@dataclass
class Tape:
    """Ordered record of every op evaluated against it."""

    nodes: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data: Any) -> Tensor:
        """Register ``data`` as a differentiable input (parameter or probe)."""
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self.nodes.append(Node(arr, (), None))
        return Tensor._wrap(arr, self, len(self.nodes) - 1)

    def record(self, value: np.ndarray, inputs: Sequence[Tensor], rule: str, ctx: Any) -> Tensor:
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(Node(value, parents, rule, ctx))
        return Tensor._wrap(value, self, len(self.nodes) - 1)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# op registration

BackwardRule = Callable[[Any, np.ndarray], tuple]
BACKWARD_RULES: dict[str, BackwardRule] = {}


def backward_rule(name: str) -> Callable[[BackwardRule], BackwardRule]:
    def register(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[name] = fn
        return fn

    return register


def _tape_of(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise BackwardError("operands belong to different tapes")
    return tape


def emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], ctx: Any = None) -> Tensor:
    """Finite-check ``value`` and record it on the inputs' tape, if any."""
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op}: non-finite value in output")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor._wrap(value)
    return tape.record(value, inputs, op, ctx)


# ---------------------------------------------------------------------------
# backward


class GradientMap(dict):
    """Gradients keyed by node id; also indexable by the leaf Tensor itself."""

    def __getitem__(self, key: Tensor | int) -> np.ndarray:
        if isinstance(key, Tensor):
            key = key.node
        return super().__getitem__(key)

    def __contains__(self, key: object) -> bool:
        if isinstance(key, Tensor):
            key = key.node
        return super().__contains__(key)


def backward(tape: Tape, root: Tensor) -> GradientMap:
    """Return d(root)/d(leaf) for every leaf on ``tape``.

    Unreached leaves get zero gradients. The tape itself is not modified.
    """
    if root.tape is not tape or root.node is None:
        raise BackwardError("root tensor was not recorded on this tape")
    if root.size != 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[root.node] = np.ones(root.shape)
    out = GradientMap()
    for i in range(len(nodes) - 1, -1, -1):
        node = nodes[i]
        g = grads[i]
        if node.rule is None:
            out[i] = g if g is not None else np.zeros(node.value.shape)
            continue
        if g is None:
            continue
        grads[i] = None
        rule = BACKWARD_RULES.get(node.rule)
        if rule is None:
            raise BackwardError(f"no backward rule registered for op {node.rule!r}")
        parent_grads = rule(node.ctx, g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = np.array(pg, dtype=np.float64, copy=True)
            else:
                grads[pid] += pg
    return out


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or self.dilation < 1:
            raise ShapeError("kernel, stride and dilation must be positive")
        if min(self.padding) < 0:
            raise ShapeError("padding must be non-negative")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int = 3, dilation: int = 1) -> ConvSpec:
        """Stride-1 spec whose zero padding preserves H and W (odd kernels)."""
        if kernel % 2 == 0:
            raise ShapeError("same padding needs an odd kernel")
        pad = dilation * (kernel - 1) // 2
        return cls(in_channels, out_channels, (kernel, kernel), (1, 1), (pad, pad), dilation)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw), d = self.kernel, self.stride, self.padding, self.dilation
        ho = (h + 2 * ph - d * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - d * (kw - 1) - 1) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output extent would be {ho}x{wo} for input {h}x{w} and {self}")
        return ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded, dilated 2-D cross-correlation.

    The padded input is laid out channel-major and flattened over
    ``(batch, row, col)``. On that flat axis every kernel tap is a fixed
    offset, so each tap is one GEMM against a contiguous slice. Positions
    whose window wraps across a row or image boundary are computed but never
    read back. Strides subsample the stride-1 result.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be BxCxHxW, got shape {x.shape}")
    b, cin, h, w = x.shape
    kh, kw = spec.kernel
    if cin != spec.in_channels:
        raise ShapeError(f"conv2d: input has {cin} channels, spec expects {spec.in_channels}")
    if weight.shape != (spec.out_channels, cin, kh, kw):
        raise ShapeError(
            f"conv2d: weight shape {weight.shape} != {(spec.out_channels, cin, kh, kw)}"
        )
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != {(spec.out_channels,)}")
    ho, wo = spec.output_size(h, w)
    geom = _ConvGeometry(x.shape, spec)
    flat = np.zeros((cin, b, geom.hp, geom.wp))
    ph, pw = spec.padding
    flat[:, :, ph : ph + h, pw : pw + w] = x.data.transpose(1, 0, 2, 3)
    flat = flat.reshape(cin, -1)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(kh * kw, spec.out_channels, cin)
    acc = np.zeros((spec.out_channels, flat.shape[1]))
    head = acc[:, : geom.span]
    for t, off in enumerate(geom.offsets):
        head += taps[t] @ flat[:, off : off + geom.span]
    grid = acc.reshape(spec.out_channels, b, geom.hp, geom.wp)[:, :, geom.rows, geom.cols]
    out = grid.transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    return emit("conv2d", out, (x, weight, bias), (flat, taps, geom))


class _ConvGeometry:
    __slots__ = ("in_shape", "spec", "hp", "wp", "span", "offsets", "rows", "cols")

    def __init__(self, in_shape: tuple[int, ...], spec: ConvSpec):
        b, _, h, w = in_shape
        (kh, kw), (sh, sw), (ph, pw), d = spec.kernel, spec.stride, spec.padding, spec.dilation
        ho, wo = spec.output_size(h, w)
        self.in_shape = in_shape
        self.spec = spec
        self.hp, self.wp = h + 2 * ph, w + 2 * pw
        self.offsets = [a * d * self.wp + c * d for a in range(kh) for c in range(kw)]
        # last valid anchor sits at (b-1, (ho-1)*sh, (wo-1)*sw) on the padded grid
        self.span = (b - 1) * self.hp * self.wp + (ho - 1) * sh * self.wp + (wo - 1) * sw + 1
        self.rows = slice(0, (ho - 1) * sh + 1, sh)
        self.cols = slice(0, (wo - 1) * sw + 1, sw)


@backward_rule("conv2d")
def _conv2d_backward(ctx, g):
    flat, taps, geom = ctx
    b, cin, h, w = geom.in_shape
    cout = taps.shape[1]
    kh, kw = geom.spec.kernel
    ph, pw = geom.spec.padding
    gacc = np.zeros((cout, b, geom.hp, geom.wp))
    gacc[:, :, geom.rows, geom.cols] = g.transpose(1, 0, 2, 3)
    gflat = gacc.reshape(cout, -1)[:, : geom.span]
    dflat = np.zeros_like(flat)
    dtaps = np.empty_like(taps)
    for t, off in enumerate(geom.offsets):
        window = slice(off, off + geom.span)
        dflat[:, window] += taps[t].T @ gflat
        dtaps[t] = gflat @ flat[:, window].T
    dw = dtaps.reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)
    db = g.sum(axis=(0, 2, 3))
    dx = dflat.reshape(cin, b, geom.hp, geom.wp)[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
    return dx, dw, db


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    tracked: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> BatchNormState:
        return cls(np.zeros(channels), np.ones(channels), 0, momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool = True) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: input must be BxCxHxW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeError(
            f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}, "
            f"running stats {state.running_mean.shape}"
        )
    g4 = gamma.data[None, :, None, None]
    b4 = beta.data[None, :, None, None]
    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ShapeError("batch_norm: train mode needs at least 2 elements per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std[None, :, None, None]
        out = xhat * g4 + b4
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))
        state.tracked += 1
        return emit("batch_norm_train", out, (x, gamma, beta), (xhat, inv_std, gamma.data))
    if state.tracked == 0:
        raise ShapeError("batch_norm: eval mode requested before any running stats were recorded")
    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * g4 + b4
    return emit("batch_norm_eval", out, (x, gamma, beta), (xhat, inv_std, gamma.data))


@backward_rule("batch_norm_train")
def _bn_train_backward(ctx, g):
    xhat, inv_std, gamma = ctx
    n = g.shape[0] * g.shape[2] * g.shape[3]
    dgamma = np.sum(g * xhat, axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    c = lambda v: v[None, :, None, None]  # noqa: E731
    dx = c(gamma * inv_std / n) * (n * g - c(dbeta) - xhat * c(dgamma))
    return dx, dgamma, dbeta


@backward_rule("batch_norm_eval")
def _bn_eval_backward(ctx, g):
    xhat, inv_std, gamma = ctx
    dx = g * (gamma * inv_std)[None, :, None, None]
    return dx, np.sum(g * xhat, axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0.0), (x,), mask)


@backward_rule("relu")
def _relu_backward(mask, g):
    return (g * mask,)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return emit("sigmoid", s, (x,), s)


@backward_rule("sigmoid")
def _sigmoid_backward(s, g):
    return (g * s * (1.0 - s),)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return emit("add", a.data + b.data, (a, b))


@backward_rule("add")
def _add_backward(_, g):
    return g, g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return emit("mul", a.data * b.data, (a, b), (a.data, b.data))


@backward_rule("mul")
def _mul_backward(ctx, g):
    a, b = ctx
    return g * b, g * a


def scale(x: Tensor, c: float) -> Tensor:
    return emit("scale", x.data * c, (x,), c)


@backward_rule("scale")
def _scale_backward(c, g):
    return (g * c,)


def sum_all(x: Tensor) -> Tensor:
    return emit("sum", np.asarray(x.data.sum()), (x,), x.shape)


@backward_rule("sum")
def _sum_backward(shape, g):
    return (np.broadcast_to(g, shape),)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of single-element tensors as one tape node."""
    if not terms:
        raise ShapeError("add_scalars: empty term list")
    for t in terms:
        if t.size != 1:
            raise ShapeError(f"add_scalars: term of shape {t.shape} is not a scalar")
    total = np.asarray(sum(float(t.data.reshape(-1)[0]) for t in terms))
    return emit("add_scalars", total, tuple(terms), tuple(t.shape for t in terms))


@backward_rule("add_scalars")
def _add_scalars_backward(shapes, g):
    return tuple(np.full(s, float(g.reshape(-1)[0])) for s in shapes)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: nothing to concatenate")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels: shape {p.shape} does not match {ref} on batch/spatial axes"
            )
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    return emit("concat_channels", out, tuple(parts), [p.shape[1] for p in parts])


@backward_rule("concat_channels")
def _concat_backward(widths, g):
    bounds = np.cumsum(widths)[:-1]
    return tuple(np.split(g, bounds, axis=1))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}) out of range for {x.shape[1]} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])
    return emit("slice_channels", out, (x,), (x.shape, start, stop))


@backward_rule("slice_channels")
def _slice_backward(ctx, g):
    shape, start, stop = ctx
    dx = np.zeros(shape)
    dx[:, start:stop] = g
    return (dx,)


def split_channels(x: Tensor, widths: Sequence[int]) -> list[Tensor]:
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"split_channels: widths {list(widths)} do not sum to {x.shape[1]}")
    out, start = [], 0
    for w in widths:
        out.append(slice_channels(x, start, start + w))
        start += w
    return out


# ---------------------------------------------------------------------------
# resampling


def max_pool_2x2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool_2x2: input must be BxCxHxW, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool_2x2: spatial extent {h}x{w} must be even")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return emit("max_pool_2x2", out, (x,), (idx, x.shape))


@backward_rule("max_pool_2x2")
def _max_pool_backward(ctx, g):
    idx, shape = ctx
    b, c, h, w = shape
    win = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    dx = win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return (dx,)


def bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor) x n interpolation matrix, align-corners-false convention."""
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear: input must be BxCxHxW, got {x.shape}")
    if factor < 1:
        raise ShapeError("upsample_bilinear: factor must be positive")
    if factor == 1:
        return x
    mh = bilinear_matrix(x.shape[2], factor)
    mw = bilinear_matrix(x.shape[3], factor)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return emit("upsample_bilinear", out, (x,), (mh, mw))


@backward_rule("upsample_bilinear")
def _upsample_backward(ctx, g):
    mh, mw = ctx
    return (np.matmul(np.matmul(mh.T, g), mw),)


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    return upsample_bilinear(x, 2)
