"""Central finite-difference checks of every backward rule.

Each case is a function of named float64 inputs returning a tensor. The
analytic side runs it on a tape and differentiates ``sum(R * out)`` for a
fixed random ``R``; the numeric side perturbs one input element by ``+-h``
and takes ``<R, out+ - out->> / 2h``. The error reported per case is
``max |analytic - numeric| / max(|numeric|, 1e-6)`` over the checked elements.

Whole-network cases check a random sample of elements. A sampled element
whose central differences at ``h`` and ``h/2`` disagree (the step straddles
a ReLU or max-pool switch) is skipped and replaced by the next candidate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from . import tensor as T
from .encoder import NetworkConfig
from .network import SegmentationNet
from .objective import LossWeights, bce_with_logits, soft_dice_loss, total_loss, tv_loss

Build = Callable[[Mapping[str, T.Tensor]], T.Tensor]
SCOPES = ("ops", "losses", "network")
TOLERANCE = 1e-4
STEP = 1e-5


@dataclass(frozen=True)
class Case:
    name: str
    build: Build
    inputs: dict[str, np.ndarray]
    samples: int | None = None  # elements checked per input; None = all


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    worst_input: str
    worst_index: tuple[int, ...]
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _run(build: Build, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    return build({k: T.Tensor(v) for k, v in inputs.items()}).data


def _central(case: Case, weights: np.ndarray, name: str, idx: tuple, h: float) -> float:
    bumped = dict(case.inputs)
    plus = case.inputs[name].copy()
    plus[idx] += h
    minus = case.inputs[name].copy()
    minus[idx] -= h
    bumped[name] = plus
    f_plus = _run(case.build, bumped)
    bumped[name] = minus
    f_minus = _run(case.build, bumped)
    return float(np.sum(weights * (f_plus - f_minus))) / (2 * h)


def check_case(case: Case, rng: np.random.Generator, h: float = STEP) -> CheckResult:
    tape = T.Tape()
    leaves = {k: tape.leaf(v) for k, v in case.inputs.items()}
    out = case.build(leaves)
    weights = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
    root = T.sum_all(T.mul(out, T.Tensor(weights))) if out.size > 1 else out
    grads = T.backward(tape, root)

    sampled = case.samples is not None
    worst = (0.0, "", ())
    checked = skipped = 0
    for name, base in case.inputs.items():
        analytic = grads[leaves[name]]
        order = rng.permutation(base.size) if sampled else np.arange(base.size)
        want = min(case.samples, base.size) if sampled else base.size
        done = 0
        for k in order:
            if done == want:
                break
            idx = np.unravel_index(int(k), base.shape)
            numeric = _central(case, weights, name, idx, h)
            if sampled:
                half = _central(case, weights, name, idx, h / 2)
                if abs(numeric - half) > 0.1 * TOLERANCE * max(abs(numeric), 1e-6):
                    skipped += 1
                    continue
            err = abs(analytic[idx] - numeric) / max(abs(numeric), 1e-6)
            done += 1
            checked += 1
            if err > worst[0] or not worst[1]:
                worst = (err, name, tuple(int(i) for i in idx))
    return CheckResult(case.name, worst[0], worst[1], worst[2], checked, skipped)


# ---------------------------------------------------------------------------
# case generators


def _separated(rng: np.random.Generator, shape: tuple[int, ...], gap: float = 0.05) -> np.ndarray:
    """Values whose pairwise gaps are at least ``gap`` (no max/ReLU ties)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap + rng.uniform(-0.2, 0.2) * gap
    return rng.permutation(vals).reshape(shape)


def _conv_case(rng, kernel: int, dilation: int, stride: int, name: str) -> Case:
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    pad = dilation * (kernel - 1) // 2
    size = int(rng.integers(max(4, dilation * (kernel - 1) + 1 - 2 * pad), 7))
    spec = T.ConvSpec(cin, cout, (kernel, kernel), (stride, stride), (pad, pad), dilation)
    return Case(
        name,
        lambda t: T.conv2d(t["x"], t["w"], t["b"], spec),
        {
            "x": rng.standard_normal((2, cin, size, size)),
            "w": rng.standard_normal((cout, cin, kernel, kernel)),
            "b": rng.standard_normal(cout),
        },
    )


def op_cases(rng: np.random.Generator) -> list[Case]:
    shape = (2, 3, 4, 4)

    def bn_train(t):
        state = T.BatchNormState.fresh(t["x"].shape[1])
        return T.batch_norm(t["x"], t["g"], t["b"], state, train=True)

    away = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return [
        _conv_case(rng, 3, 1, 1, "conv2d_3x3"),
        _conv_case(rng, 3, 2, 1, "conv2d_dilated2"),
        _conv_case(rng, 3, 3, 1, "conv2d_dilated3"),
        _conv_case(rng, 3, 2, 2, "conv2d_strided"),
        _conv_case(rng, 1, 1, 1, "conv2d_1x1"),
        Case(
            "batch_norm_train",
            bn_train,
            {"x": rng.standard_normal(shape) * 2 + 1, "g": rng.uniform(0.5, 1.5, 3), "b": rng.standard_normal(3)},
        ),
        Case("relu", lambda t: T.relu(t["x"]), {"x": away}),
        Case("sigmoid", lambda t: T.sigmoid(t["x"]), {"x": rng.standard_normal(shape) * 2}),
        Case("add", lambda t: T.add(t["a"], t["b"]), {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)}),
        Case("mul", lambda t: T.mul(t["a"], t["b"]), {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)}),
        Case("scale", lambda t: T.scale(t["x"], -1.7), {"x": rng.standard_normal(shape)}),
        Case("mean_all", lambda t: T.mean_all(t["x"]), {"x": rng.standard_normal(shape)}),
        Case(
            "concat_channels",
            lambda t: T.concat_channels([t["a"], t["b"]]),
            {"a": rng.standard_normal((2, 2, 4, 4)), "b": rng.standard_normal((2, 3, 4, 4))},
        ),
        Case("slice_channels", lambda t: T.slice_channels(t["x"], 1, 3), {"x": rng.standard_normal(shape)}),
        Case("max_pool_2x2", lambda t: T.max_pool_2x2(t["x"]), {"x": _separated(rng, shape)}),
        Case("upsample_bilinear_2x", lambda t: T.upsample_bilinear_2x(t["x"]), {"x": rng.standard_normal((2, 2, 3, 3))}),
    ]


def loss_cases(rng: np.random.Generator) -> list[Case]:
    shape = (2, 1, 6, 6)
    targets = (rng.random(shape) < 0.4).astype(np.float64)
    targets[0, 0, 0, 0] = 1.0
    logits = rng.standard_normal(shape) * 1.5
    net = SegmentationNet(NetworkConfig(depth=2, base_channels=4, pcam_paths=2), rng)
    net_targets = (rng.random((2, 1, 8, 8)) < 0.4).astype(np.float64)
    return [
        Case("bce_with_logits", lambda t: bce_with_logits(t["z"], targets), {"z": logits}),
        Case("soft_dice", lambda t: soft_dice_loss(t["z"], targets), {"z": logits}),
        Case("tv", lambda t: tv_loss(t["z"]), {"z": logits}),
        _network_case(net, "total_loss_toy", net_targets, rng, samples=2),
    ]


def _network_case(
    net: SegmentationNet, name: str, targets: np.ndarray, rng: np.random.Generator, samples: int
) -> Case:
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in net.params.items()}
    images = rng.random((targets.shape[0], net.config.in_channels) + targets.shape[2:])
    weights = LossWeights()

    def build(t):
        return total_loss(net.forward(images, t, train=True), targets, weights).total

    return Case(name, build, params, samples)


def network_cases(rng: np.random.Generator) -> list[Case]:
    net = SegmentationNet(NetworkConfig(depth=3, base_channels=4, pcam_paths=2), rng)
    targets = (rng.random((2, 1, 8, 8)) < 0.4).astype(np.float64)
    return [_network_case(net, "network_total_loss", targets, rng, samples=1)]


CASES: dict[str, Callable[[np.random.Generator], list[Case]]] = {
    "ops": op_cases,
    "losses": loss_cases,
    "network": network_cases,
}


def run_scope(scope: str, seed: int = 0, h: float = STEP) -> Iterator[CheckResult]:
    if scope not in CASES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    rng = np.random.default_rng(seed)
    for case in CASES[scope](rng):
        yield check_case(case, rng, h)
