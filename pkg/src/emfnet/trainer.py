"""Adam training loop, evaluation and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"PEMF" | u32 version | u64 header length | header (UTF-8 JSON)
    then records until EOF:
    u32 name length | name (UTF-8) | u32 rank | rank x u64 extents | float64 payload

The JSON header carries the network config, epoch/step counters, the RNG
state and a free-form ``meta`` dict; it is written with sorted keys so that
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import SegmentationSample, stack
from .decoder import predict_mask
from .encoder import NetworkConfig
from .metrics import ImageRecord, MetricsReport, aggregate
from .network import SegmentationNet
from .objective import LossWeights, total_loss
from .tensor import BatchNormState, NumericError, Tape, backward

log = logging.getLogger(__name__)

MAGIC = b"PEMF"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> AdamState:
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    moments: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    All gradients are validated before anything is touched, so a rejected step
    leaves parameters and moments exactly as they were.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape or moments.m[name].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch or missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(g))[0])
            raise NumericError(f"adam_step: non-finite gradient for {name} at index {bad}")
    b1, b2 = betas
    moments.t += 1
    t = moments.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return moments


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 450
    batch_size: int = 2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    dice_epsilon: float = 1e-6
    tv_all_scales: bool = True
    eval_every: int = 0  # epochs between held-out evaluations; 0 = final only
    threshold: float = 0.5

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            out.append(f"train.lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                out.append(f"train.{name} must lie in [0, 1), got {b}")
        if not self.eps > 0:
            out.append(f"train.eps must be positive, got {self.eps}")
        if not self.dice_epsilon > 0:
            out.append(f"train.dice_epsilon must be positive, got {self.dice_epsilon}")
        if self.eval_every < 0:
            out.append("train.eval_every must be >= 0")
        if not 0 < self.threshold < 1:
            out.append(f"train.threshold must lie in (0, 1), got {self.threshold}")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    network: NetworkConfig
    params: dict[str, np.ndarray]
    bn: dict[str, BatchNormState]
    adam: AdamState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(
        cls,
        net: SegmentationNet,
        adam: AdamState | None = None,
        epoch: int = 0,
        rng: np.random.Generator | None = None,
        meta: dict | None = None,
    ) -> Checkpoint:
        return cls(
            net.config,
            {k: v.copy() for k, v in net.params.items()},
            copy.deepcopy(net.bn_states),
            copy.deepcopy(adam),
            epoch,
            copy.deepcopy(rng.bit_generator.state) if rng is not None else None,
            dict(meta or {}),
        )

    def to_net(self) -> SegmentationNet:
        net = SegmentationNet(self.network, 0)
        if set(net.params) != set(self.params):
            missing = sorted(set(net.params) ^ set(self.params))
            raise CheckpointError(f"checkpoint parameters do not match the network: {missing[:5]}")
        for k, v in self.params.items():
            if net.params[k].shape != v.shape:
                raise CheckpointError(f"checkpoint parameter {k} has shape {v.shape}, expected {net.params[k].shape}")
            net.params[k] = v.copy()
        net.bn_states = copy.deepcopy(self.bn)
        return net


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


def _records(ckpt: Checkpoint):
    for k, v in ckpt.params.items():
        yield f"param/{k}", v
    for k, s in ckpt.bn.items():
        yield f"bn/{k}/running_mean", s.running_mean
        yield f"bn/{k}/running_var", s.running_var
        yield f"bn/{k}/tracked", np.array([float(s.tracked)])
    if ckpt.adam is not None:
        for k, v in ckpt.adam.m.items():
            yield f"adam.m/{k}", v
        for k, v in ckpt.adam.v.items():
            yield f"adam.v/{k}", v


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "network": ckpt.network.to_dict(),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam.t if ckpt.adam is not None else None,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hb)), hb]
    for name, arr in _records(ckpt):
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a PEMF checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<IQ", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(buf[pos : pos + hlen].decode())
        pos += hlen
        records: dict[str, np.ndarray] = {}
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = math.prod(shape)
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"record {name} truncated")
            records[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
        network = NetworkConfig.from_dict(header["network"])
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc

    params, bn_parts, m, v = {}, {}, {}, {}
    for name, arr in records.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = arr
        elif kind == "bn":
            layer, _, field_name = rest.rpartition("/")
            bn_parts.setdefault(layer, {})[field_name] = arr
        elif kind == "adam.m":
            m[rest] = arr
        elif kind == "adam.v":
            v[rest] = arr
        else:
            raise CheckpointError(f"unknown record {name}")
    bn = {
        layer: BatchNormState(p["running_mean"], p["running_var"], int(p["tracked"][0]))
        for layer, p in bn_parts.items()
    }
    adam = AdamState(m, v, header["adam_t"]) if header["adam_t"] is not None else None
    return Checkpoint(network, params, bn, adam, header["epoch"], header["rng_state"], header["meta"])


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(buf)


# ---------------------------------------------------------------------------
# training


class TrainingHalted(NumericError):
    """Non-finite loss or gradient; ``last_good`` holds the pre-failure state."""

    def __init__(self, message: str, last_good: Checkpoint, history: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best: Checkpoint | None = None
    best_dsc: float | None = None
    reports: dict[int, MetricsReport] = field(default_factory=dict)

    @property
    def net(self) -> SegmentationNet:
        return self.checkpoint.to_net()


HISTORY_COLUMNS = ("epoch", "loss", "bce", "dice", "tv", "eval_dsc")


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k])) for k in HISTORY_COLUMNS})


def train(
    network: NetworkConfig,
    train_samples: list[SegmentationSample],
    config: TrainConfig,
    eval_samples: list[SegmentationSample] | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Seeded Adam training over shuffled mini-batches.

    The same generator seeds parameter init and then the per-epoch shuffles.
    With ``out_dir`` the final and best-DSC checkpoints, the loss history and
    each evaluation report are written there.
    """
    problems = config.problems()
    if problems:
        raise ValueError("; ".join(problems))
    if not train_samples:
        raise ValueError("training set is empty")
    h, w = train_samples[0].image.shape[1:]
    network.check_input(h, w)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    net = SegmentationNet(network, rng)
    adam = AdamState.zeros_like(net.params)
    images, masks = stack(train_samples)
    n = len(train_samples)
    history: list[dict] = []
    result = TrainResult(Checkpoint.capture(net, adam, 0, rng), history)
    meta = {"train": _jsonable(config.to_dict()), "input_size": [int(h), int(w)]}

    for epoch in range(1, config.epochs + 1):
        last_good = Checkpoint.capture(net, adam, epoch - 1, rng, meta)
        sums = {"loss": 0.0, "bce": 0.0, "dice": 0.0, "tv": 0.0}
        order = rng.permutation(n)
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                tape = Tape()
                leaves = net.leaves(tape)
                outputs = net.forward(images[idx], leaves, train=True)
                res = total_loss(
                    outputs, masks[idx], config.loss, config.dice_epsilon, config.tv_all_scales
                )
                grads = backward(tape, res.total)
                adam_step(
                    net.params,
                    {k: grads[t] for k, t in leaves.items()},
                    adam,
                    config.lr,
                    (config.beta1, config.beta2),
                    config.eps,
                )
                weight = len(idx) / n
                sums["loss"] += weight * res.total.item()
                sums["bce"] += weight * res.bce
                sums["dice"] += weight * res.dice
                sums["tv"] += weight * res.tv
        except NumericError as exc:
            if out is not None:
                save_checkpoint(last_good, out / "last_good.pemf")
                write_history_csv(history, out / "history.csv")
            raise TrainingHalted(f"epoch {epoch}: {exc}", last_good, history) from exc

        row = {"epoch": epoch, **sums, "eval_dsc": None}
        final = epoch == config.epochs
        if eval_samples and ((config.eval_every and epoch % config.eval_every == 0) or final):
            report = evaluate_net(net, eval_samples, config.threshold)
            row["eval_dsc"] = report.mean("dsc")
            result.reports[epoch] = report
            if result.best_dsc is None or row["eval_dsc"] > result.best_dsc:
                result.best_dsc = row["eval_dsc"]
                result.best = Checkpoint.capture(net, adam, epoch, rng, meta)
            if out is not None:
                from .metrics import write_report_csv

                write_report_csv(report, out / f"metrics_epoch{epoch:04d}.csv")
        history.append(row)
        log.info("epoch %d loss %.5f eval_dsc %s", epoch, row["loss"], row["eval_dsc"])
        if on_epoch is not None:
            on_epoch(row)

    result.checkpoint = Checkpoint.capture(net, adam, config.epochs, rng, meta)
    if out is not None:
        save_checkpoint(result.checkpoint, out / "final.pemf")
        if result.best is not None:
            save_checkpoint(result.best, out / "best.pemf")
        write_history_csv(history, out / "history.csv")
    return result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# evaluation


def predict_probabilities(net: SegmentationNet, images: np.ndarray, batch: int = 8) -> np.ndarray:
    from scipy.special import expit

    return expit(np.concatenate([net.predict_logits(images[i : i + batch]) for i in range(0, len(images), batch)]))


def evaluate_net(
    net: SegmentationNet,
    samples: list[SegmentationSample],
    threshold: float = 0.5,
    folds: Mapping[str, int] | int | str = "all",
    include_normal: bool = False,
    batch: int = 8,
) -> MetricsReport:
    if not samples:
        raise ValueError("evaluate: no samples given")
    h, w = samples[0].image.shape[1:]
    net.config.check_input(h, w)
    images, masks = stack(samples)
    records = []
    for start in range(0, len(samples), batch):
        logits = net.predict_logits(images[start : start + batch])
        preds = predict_mask(logits, threshold)
        for k, s in enumerate(samples[start : start + batch]):
            fold = folds.get(s.id, "all") if isinstance(folds, Mapping) else folds
            records.append(ImageRecord.from_masks(s.id, fold, s.cls, preds[k], masks[start + k]))
    return aggregate(records, include_normal)


def evaluate(
    checkpoint: Checkpoint,
    samples: list[SegmentationSample],
    threshold: float = 0.5,
    folds: Mapping[str, int] | int | str = "all",
    include_normal: bool = False,
) -> MetricsReport:
    return evaluate_net(checkpoint.to_net(), samples, threshold, folds, include_normal)
