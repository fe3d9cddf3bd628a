"""Segmentation objective: BCE-with-logits, soft Dice and total variation.

Each loss is a single fused tape op with an analytic backward rule. The
probability-space helpers (:func:`total_variation`, :func:`dice_from_probs`)
share the forward arithmetic and are handy for reporting.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, add_scalars, backward_rule, emit, scale


@dataclass(frozen=True)
class LossWeights:
    lambda_bce: float = 1.0
    lambda_tv: float = 1e-3
    lambda_dice: float = 1.0

    def __post_init__(self) -> None:
        ws = (self.lambda_bce, self.lambda_tv, self.lambda_dice)
        if any(not np.isfinite(w) or w < 0 for w in ws):
            raise ValueError(f"loss weights must be finite and non-negative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")


def _targets(op: str, logits: Tensor, targets) -> np.ndarray:
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"{op}: logits {logits.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{op}: targets must be binary")
    return y.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# BCE


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy, evaluated as max(z,0) - z*y + log1p(exp(-|z|))."""
    y = _targets("bce_with_logits", logits, targets)
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return emit("bce_with_logits", np.asarray(per.mean()), (logits,), (z, y))


@backward_rule("bce_with_logits")
def _bce_backward(ctx, g):
    z, y = ctx
    return (g * (expit(z) - y) / z.size,)


# ---------------------------------------------------------------------------
# soft Dice


def dice_from_probs(p: np.ndarray, y: np.ndarray, epsilon: float = 1e-6) -> float:
    inter = float(np.sum(p * y))
    denom = float(np.sum(p) + np.sum(y))
    return 1.0 - (2.0 * inter + epsilon) / (denom + epsilon)


def soft_dice_loss(logits: Tensor, targets, epsilon: float = 1e-6) -> Tensor:
    if epsilon <= 0:
        raise ValueError("soft_dice_loss: epsilon must be positive")
    y = _targets("soft_dice_loss", logits, targets)
    p = expit(logits.data)
    inter = np.sum(p * y)
    denom = np.sum(p) + np.sum(y)
    value = 1.0 - (2.0 * inter + epsilon) / (denom + epsilon)
    return emit("soft_dice", np.asarray(value), (logits,), (p, y, inter, denom, epsilon))


@backward_rule("soft_dice")
def _dice_backward(ctx, g):
    p, y, inter, denom, eps = ctx
    s = denom + eps
    dp = -(2.0 * y * s - (2.0 * inter + eps)) / (s * s)
    return (g * dp * p * (1.0 - p),)


# ---------------------------------------------------------------------------
# total variation


def total_variation(p: np.ndarray) -> float:
    """Mean anisotropic TV of a ``... x H x W`` map with forward differences.

    Normalised by the pixel count (all leading axes times H*W).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 2 or p.shape[-1] < 2 or p.shape[-2] < 2:
        raise ShapeError(f"total_variation: spatial extent must be >= 2x2, got {p.shape}")
    dx = np.abs(np.diff(p, axis=-1)).sum()
    dy = np.abs(np.diff(p, axis=-2)).sum()
    return float((dx + dy) / p.size)


def tv_loss(logits: Tensor) -> Tensor:
    if logits.ndim != 4 or logits.shape[2] < 2 or logits.shape[3] < 2:
        raise ShapeError(f"tv_loss: need BxCxHxW with H, W >= 2, got {logits.shape}")
    p = expit(logits.data)
    sx = np.sign(np.diff(p, axis=3))
    sy = np.sign(np.diff(p, axis=2))
    value = (np.abs(np.diff(p, axis=3)).sum() + np.abs(np.diff(p, axis=2)).sum()) / p.size
    return emit("tv", np.asarray(value), (logits,), (p, sx, sy))


@backward_rule("tv")
def _tv_backward(ctx, g):
    p, sx, sy = ctx
    dp = np.zeros_like(p)
    dp[..., :, 1:] += sx
    dp[..., :, :-1] -= sx
    dp[..., 1:, :] += sy
    dp[..., :-1, :] -= sy
    return (g * dp / p.size * p * (1.0 - p),)


# ---------------------------------------------------------------------------
# combined


def downsample_nearest(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour reduction of a ``B x C x H x W`` mask by an integer factor."""
    if factor == 1:
        return mask
    return np.ascontiguousarray(mask[:, :, ::factor, ::factor])


@dataclass
class LossResult:
    """The differentiable total plus its weighted parts as plain floats."""

    total: Tensor
    bce: float
    dice: float
    tv: float


def scale_loss(
    logits: Tensor,
    targets: np.ndarray,
    weights: LossWeights,
    epsilon: float = 1e-6,
    use_tv: bool = True,
) -> tuple[list[Tensor], dict[str, float]]:
    """Weighted per-scale terms ``lambda_bce*BCE + lambda_tv*TV + lambda_dice*Dice``."""
    terms, parts = [], {"bce": 0.0, "dice": 0.0, "tv": 0.0}
    if weights.lambda_bce > 0:
        t = scale(bce_with_logits(logits, targets), weights.lambda_bce)
        terms.append(t)
        parts["bce"] = t.item()
    if weights.lambda_tv > 0 and use_tv:
        t = scale(tv_loss(logits), weights.lambda_tv)
        terms.append(t)
        parts["tv"] = t.item()
    if weights.lambda_dice > 0:
        t = scale(soft_dice_loss(logits, targets, epsilon), weights.lambda_dice)
        terms.append(t)
        parts["dice"] = t.item()
    return terms, parts


def total_loss(
    side_outputs,
    targets: np.ndarray,
    weights: LossWeights,
    epsilon: float = 1e-6,
    tv_all_scales: bool = True,
) -> LossResult:
    """``loss(refined) + mean_i loss(side_i)`` against nearest-downsampled targets.

    With ``tv_all_scales`` off the TV term only applies to the refined output.
    Side outputs narrower than two pixels in either direction have no
    neighbouring pairs, so they carry no TV term.
    """
    targets = np.asarray(targets, dtype=np.float64)
    refined: Tensor = side_outputs.refined
    sides: Sequence[Tensor] = side_outputs.sides
    if targets.shape != refined.shape:
        raise ShapeError(f"total_loss: targets {targets.shape} vs logits {refined.shape}")
    terms, parts = scale_loss(refined, targets, weights, epsilon)
    k = len(sides)
    full = refined.shape[2]
    for s in sides:
        factor = full // s.shape[2]
        has_pairs = min(s.shape[2:]) >= 2
        side_terms, side_parts = scale_loss(
            s, downsample_nearest(targets, factor), weights, epsilon, use_tv=tv_all_scales and has_pairs
        )
        terms.extend(scale(t, 1.0 / k) for t in side_terms)
        for name, v in side_parts.items():
            parts[name] += v / k
    return LossResult(add_scalars(terms), parts["bce"], parts["dice"], parts["tv"])
