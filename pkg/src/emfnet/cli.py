"""Command-line entry point: ``emfnet {train,predict,gradcheck,synth,folds,eval}``.

Exit codes: 0 success, 2 configuration or checkpoint error, 3 data error,
4 numeric failure (non-finite loss or gradient), 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import (
    DataError,
    load_dataset,
    make_folds,
    minmax,
    preprocess,
    read_gray,
    read_manifest,
    resize_image,
    resize_mask,
    synth_generate,
    write_flat,
    write_manifest,
)
from .decoder import predict_mask
from .encoder import NetworkConfig
from .gradcheck import SCOPES, run_scope
from .metrics import write_report_csv
from .objective import LossWeights
from .tensor import NumericError
from .trainer import CheckpointError, TrainConfig, TrainingHalted, evaluate, load_checkpoint, train

log = logging.getLogger("emfnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5
LAYOUTS = ("flat", "busi", "busis")


class ConfigError(Exception):
    """One or more invalid configuration fields; ``problems`` lists them all."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


# ---------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass
class DataConfig:
    source: str = "synth"  # "synth" or a dataset directory
    layout: str = "flat"
    size: tuple[int, int] = (256, 256)
    manifest: str | None = None
    test_fold: int | None = None
    synth_count: int = 80
    synth_test: int = 20
    synth_seed: int = 0
    synth_noise: float = 0.3

    def problems(self) -> list[str]:
        out = []
        if self.layout not in LAYOUTS:
            out.append(f"data.layout must be one of {LAYOUTS}, got {self.layout!r}")
        if len(self.size) != 2 or any(not isinstance(v, int) or v < 1 for v in self.size):
            out.append(f"data.size must be two positive integers, got {self.size!r}")
        if self.source == "synth":
            if self.synth_count < 2:
                out.append(f"data.synth_count must be >= 2, got {self.synth_count}")
            if not 0 <= self.synth_test < self.synth_count:
                out.append("data.synth_test must lie in [0, synth_count)")
            if self.synth_noise < 0:
                out.append("data.synth_noise must be non-negative")
        if self.test_fold is not None and self.manifest is None:
            out.append("data.test_fold needs data.manifest")
        return out


DEFAULTS: dict[str, Any] = {
    "network": NetworkConfig.desk().to_dict(),
    "train": {k: v for k, v in dataclasses.asdict(TrainConfig()).items() if k != "loss"},
    "loss": dataclasses.asdict(LossWeights()),
    "data": dataclasses.asdict(DataConfig()),
    "output": "runs/emfnet",
}


@dataclasses.dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    data: DataConfig
    output: Path

    def to_dict(self) -> dict:
        t = dataclasses.asdict(self.train)
        loss = t.pop("loss")
        return {
            "network": self.network.to_dict(),
            "train": t,
            "loss": loss,
            "data": dataclasses.asdict(self.data),
            "output": str(self.output),
        }


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(tree: dict, dotted: str, value: Any) -> str | None:
    """Set ``tree[a][b] = value`` for ``a.b``; returns a problem string or None."""
    *head, last = dotted.split(".")
    node = tree
    for key in head:
        if not isinstance(node.get(key), dict):
            return f"unknown configuration key {dotted!r}"
        node = node[key]
    if last not in node:
        return f"unknown configuration key {dotted!r}"
    node[last] = value
    return None


def _check_type(path: str, value: Any, default: Any) -> str | None:
    if default is None or value is None:
        return None
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, type(default))
    return None if ok else f"{path} must be {type(default).__name__}, got {value!r}"


def build_run_config(raw: dict | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Merge a config dict and ``key=value`` overrides over the defaults.

    Every problem found is collected and raised together as ConfigError.
    """
    tree = copy.deepcopy(DEFAULTS)
    problems: list[str] = []
    for section, body in (raw or {}).items():
        if section not in tree:
            problems.append(f"unknown configuration section {section!r}")
        elif isinstance(tree[section], dict):
            if not isinstance(body, dict):
                problems.append(f"section {section!r} must be an object")
                continue
            for key, value in body.items():
                p = apply_override(tree, f"{section}.{key}", value)
                if p:
                    problems.append(p)
        else:
            tree[section] = body
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        p = apply_override(tree, key.strip(), parse_value(text))
        if p:
            problems.append(p)

    for section in ("network", "train", "loss", "data"):
        for key, default in DEFAULTS[section].items():
            p = _check_type(f"{section}.{key}", tree[section][key], default)
            if p:
                problems.append(p)
                # keep validating the other fields against a well-typed stand-in
                tree[section][key] = default

    network = loss = None
    try:
        network = NetworkConfig(**tree["network"])
    except ValueError as exc:
        problems.extend(f"network: {p}" for p in str(exc).split("; "))
    try:
        loss = LossWeights(**tree["loss"])
    except ValueError as exc:
        problems.append(f"loss: {exc}")
    problems.extend(TrainConfig(**tree["train"]).problems())
    d = dict(tree["data"])
    d["size"] = tuple(d["size"])
    data = DataConfig(**d)
    problems.extend(data.problems())
    if network is not None and not data.problems():
        try:
            network.check_input(*data.size)
        except ValueError as exc:
            problems.append(f"data.size: {exc}")
    if problems:
        raise ConfigError(problems)
    train_cfg = TrainConfig(**tree["train"], loss=loss)
    return RunConfig(network, train_cfg, data, Path(tree["output"]))


def load_run_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    raw = None
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigError([f"config file {path} must hold a JSON object"])
    return build_run_config(raw, overrides)


# ---------------------------------------------------------------------------
# commands


def _load_samples(data: DataConfig):
    """Returns (train samples, held-out samples or None, fold map or "all")."""
    if data.source == "synth":
        samples = synth_generate(data.synth_count, data.size[0], data.synth_seed, data.synth_noise)
        if data.size[0] != data.size[1]:
            samples = [preprocess(s, data.size) for s in samples]
        n_train = data.synth_count - data.synth_test
        return samples[:n_train], samples[n_train:] or None, "all"
    samples = [preprocess(s, data.size) for s in load_dataset(data.source, data.layout)]
    if data.manifest is None:
        return samples, None, "all"
    folds = read_manifest(data.manifest)
    unknown = [s.id for s in samples if s.id not in folds]
    if unknown:
        raise DataError(f"{len(unknown)} samples missing from manifest {data.manifest}: {unknown[:5]}")
    if data.test_fold is None:
        return samples, None, folds
    test = [s for s in samples if folds[s.id] == data.test_fold]
    if not test:
        raise DataError(f"fold {data.test_fold} is empty in manifest {data.manifest}")
    return [s for s in samples if folds[s.id] != data.test_fold], test, folds


def cmd_train(args: argparse.Namespace) -> int:
    overrides = list(args.set or [])
    if args.data is not None:
        overrides.append(f"data.source={json.dumps(args.data)}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.out is not None:
        overrides.append(f"output={json.dumps(args.out)}")
    cfg = load_run_config(args.config, overrides)
    train_samples, test_samples, _ = _load_samples(cfg.data)
    cfg.output.mkdir(parents=True, exist_ok=True)
    (cfg.output / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(cfg.network, train_samples, cfg.train, test_samples, cfg.output)
    final = result.history[-1]
    print(f"trained {cfg.train.epochs} epochs: loss {final['loss']:.6f}", end="")
    if final["eval_dsc"] is not None:
        print(f", held-out DSC {final['eval_dsc']:.4f}", end="")
    print(f"\noutputs written to {cfg.output}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    from PIL import Image

    ckpt = load_checkpoint(args.checkpoint)
    size = tuple(args.size) if args.size else tuple(ckpt.meta.get("input_size", ()))
    if len(size) != 2:
        raise ConfigError(["checkpoint does not record its input size; pass --size H W"])
    try:
        ckpt.network.check_input(*size)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    image = read_gray(Path(args.input)) / 255.0
    x = minmax(resize_image(image, size))[None, None]
    net = ckpt.to_net()
    mask = predict_mask(net.predict_logits(x), args.threshold)[0, 0]
    mask = resize_mask(mask.astype(np.float64), image.shape)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out)
    print(f"mask written to {out} ({image.shape[0]}x{image.shape[1]})")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    failures = []
    for scope in scopes:
        for seed in range(args.seed, args.seed + args.seeds):
            for r in run_scope(scope, seed):
                status = "ok" if r.passed else "FAIL"
                print(
                    f"{scope:8s} seed {seed:3d} {r.name:24s} max rel err {r.error:.3e} "
                    f"at {r.worst_input}{list(r.worst_index)} ({r.checked} checked) {status}"
                )
                if not r.passed:
                    failures.append((scope, seed, r))
    if failures:
        for scope, seed, r in failures:
            print(
                f"gradcheck FAILED: op {r.name} (scope {scope}, seed {seed}) worst element "
                f"{r.worst_input}{list(r.worst_index)} relative error {r.error:.3e}",
                file=sys.stderr,
            )
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    problems = []
    if args.count < 1:
        problems.append(f"--count must be >= 1, got {args.count}")
    if args.size < 8:
        problems.append(f"--size must be >= 8, got {args.size}")
    if args.noise < 0:
        problems.append(f"--noise must be non-negative, got {args.noise}")
    if problems:
        raise ConfigError(problems)
    samples = synth_generate(args.count, args.size, args.seed, args.noise)
    root = write_flat(samples, args.out)
    print(f"wrote {len(samples)} samples to {root}")
    return EXIT_OK


def cmd_folds(args: argparse.Namespace) -> int:
    if args.k < 2:
        raise ConfigError([f"--k must be >= 2, got {args.k}"])
    samples = load_dataset(args.data, args.layout)
    split = make_folds(samples, args.k, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(split, {s.id: s.cls for s in samples}, out)
    print(f"fold sizes {split.sizes()} written to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    size = tuple(args.size) if args.size else tuple(ckpt.meta.get("input_size", ()))
    if len(size) != 2:
        raise ConfigError(["checkpoint does not record its input size; pass --size H W"])
    samples = load_dataset(args.data, args.layout)
    folds: dict[str, int] | str = "all"
    if args.manifest:
        folds = read_manifest(args.manifest)
        if args.fold is not None:
            samples = [s for s in samples if folds.get(s.id) == args.fold]
            if not samples:
                raise DataError(f"no samples labelled fold {args.fold} in {args.manifest}")
    elif args.fold is not None:
        raise ConfigError(["--fold needs --manifest"])
    try:
        ckpt.network.check_input(*size)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    samples = [preprocess(s, size) for s in samples]
    report = evaluate(ckpt, samples, args.threshold, folds, args.include_normal)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out)
    g = report.get()
    print(f"{g.n} images: DSC {g.mean['dsc']:.4f} +- {g.std['dsc']:.4f}; report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="emfnet", description="CPU lesion segmentation: train, predict and verify.", formatter_class=fmt
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--config", help="JSON run configuration", default=None)
    p.add_argument("--data", help='dataset directory or "synth" (overrides data.source)', default=None)
    p.add_argument("--epochs", type=int, help="overrides train.epochs", default=None)
    p.add_argument("--out", help="output directory (overrides output)", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one image", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="PEMF checkpoint")
    p.add_argument("--input", required=True, help="input PNG")
    p.add_argument("--output", required=True, help="output mask PNG")
    p.add_argument("--threshold", type=float, default=0.5, help="probability threshold")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None, help="network input size")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    p.add_argument("--scope", choices=SCOPES + ("all",), default="ops", help="which suite to run")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset (flat layout)", formatter_class=fmt)
    p.add_argument("--count", type=int, default=80, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--noise", type=float, default=0.3, help="speckle noise level")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("folds", help="write a stratified fold manifest", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--layout", choices=LAYOUTS, default="flat", help="directory layout")
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--out", required=True, help="manifest CSV path")
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="PEMF checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--layout", choices=LAYOUTS, default="flat", help="directory layout")
    p.add_argument("--manifest", default=None, help="fold manifest CSV")
    p.add_argument("--fold", type=int, default=None, help="evaluate only this fold")
    p.add_argument("--threshold", type=float, default=0.5, help="probability threshold")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=None, help="network input size")
    p.add_argument("--include-normal", action="store_true", help="keep normal-class images")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingHalted as exc:
        print(f"numeric failure: {exc}; last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
