"""Dataset ingestion, preprocessing, fold splitting and synthetic lesions.

On-disk layouts understood by :func:`load_dataset`:

``flat``
    ``images/NAME.png`` with ``masks/NAME.png``; optional ``classes.csv``
    (``id,class``), otherwise every sample is benign.
``busi``
    ``<class>/NAME.png`` with one or more ``<class>/NAME_mask*.png``
    companions (multiple masks are OR-ed together).
``busis``
    ``original/NAME.png`` with ``GT/NAME.png``; optional ``classes.csv``.
"""
from __future__ import annotations

import csv
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

CLASSES = ("benign", "malignant", "normal")
IMAGE_SUFFIXES = (".png",)


class DataError(Exception):
    """Unreadable, missing or inconsistent dataset files."""


@dataclass
class SegmentationSample:
    id: str
    image: np.ndarray  # 1 x H x W, float64 in [0, 1]
    mask: np.ndarray  # 1 x H x W, float64 in {0, 1}
    cls: str = "benign"

    def __post_init__(self) -> None:
        if self.image.shape != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if self.cls not in CLASSES:
            raise DataError(f"{self.id}: unknown class {self.cls!r}")


# ---------------------------------------------------------------------------
# PNG I/O


def read_gray(path: Path) -> np.ndarray:
    """8-bit PNG (grayscale or RGB) as float64 in [0, 255]; RGB reduced by luminance."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "I", "I;16"):
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a 2-D image, got shape {arr.shape}")
    return arr


def read_mask(path: Path) -> np.ndarray:
    return (read_gray(path) > 127).astype(np.float64)


def write_gray(path: Path, arr: np.ndarray) -> None:
    """Write a 2-D array in [0, 1] as an 8-bit PNG."""
    img = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def _read_classes(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    with path.open(newline="") as fh:
        return {row["id"]: row["class"] for row in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# loading


def load_dataset(root: str | Path, layout: str = "flat") -> list[SegmentationSample]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    if layout == "flat":
        pairs = _paired_dirs(root, "images", "masks")
        classes = _read_classes(root / "classes.csv")
    elif layout == "busis":
        pairs = _paired_dirs(root, "original", "GT")
        classes = _read_classes(root / "classes.csv")
    elif layout == "busi":
        pairs, classes = _busi_pairs(root)
    else:
        raise DataError(f"unknown layout {layout!r}; expected flat, busi or busis")
    samples = []
    for sid, (img_path, mask_paths) in sorted(pairs.items()):
        image = read_gray(img_path) / 255.0
        mask = np.zeros_like(image)
        for mp in mask_paths:
            m = read_mask(mp)
            if m.shape != image.shape:
                raise DataError(f"mask {mp} shape {m.shape} != image shape {image.shape}")
            mask = np.maximum(mask, m)
        samples.append(SegmentationSample(sid, image[None], mask[None], classes.get(sid, "benign")))
    return samples


def _paired_dirs(root: Path, img_dir: str, mask_dir: str):
    idir, mdir = root / img_dir, root / mask_dir
    for d in (idir, mdir):
        if not d.is_dir():
            raise DataError(f"expected directory {d}")
    images = {p.stem: p for p in idir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    masks = {p.stem: p for p in mdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    orphans = sorted(set(images) - set(masks))
    if orphans:
        raise DataError(f"images without masks in {root}: {', '.join(orphans)}")
    return {sid: (images[sid], [masks[sid]]) for sid in images}


_BUSI_MASK = re.compile(r"^(?P<stem>.+)_mask(_\d+)?$")


def _busi_pairs(root: Path):
    pairs, classes, orphans = {}, {}, []
    for cls in CLASSES:
        cdir = root / cls
        if not cdir.is_dir():
            continue
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        masks: dict[str, list[Path]] = {}
        images = {}
        for p in files:
            m = _BUSI_MASK.match(p.stem)
            if m:
                masks.setdefault(m.group("stem"), []).append(p)
            else:
                images[p.stem] = p
        for stem, path in images.items():
            if stem not in masks:
                orphans.append(str(path))
                continue
            sid = f"{cls}/{stem}"
            pairs[sid] = (path, masks[stem])
            classes[sid] = cls
    if orphans:
        raise DataError(f"images without masks: {', '.join(orphans)}")
    if not pairs:
        raise DataError(f"no BUSI class directories with images under {root}")
    return pairs, classes


def write_flat(samples: list[SegmentationSample], root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_gray(root / "images" / f"{s.id}.png", s.image[0])
        write_gray(root / "masks" / f"{s.id}.png", s.mask[0])
    with (root / "classes.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class"])
        for s in samples:
            w.writerow([s.id, s.cls])
    return root


# ---------------------------------------------------------------------------
# preprocessing


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D float image."""
    if img.shape == tuple(size):
        return img
    h, w = size
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize; values stay in {0, 1}."""
    if mask.shape == tuple(size):
        return mask
    h, w = size
    im = Image.fromarray((mask > 0.5).astype(np.uint8) * 255, mode="L")
    return (np.asarray(im.resize((w, h), Image.NEAREST)) > 127).astype(np.float64)


def minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def preprocess(sample: SegmentationSample, target_size: tuple[int, int]) -> SegmentationSample:
    h, w = target_size
    if h < 1 or w < 1:
        raise DataError(f"target size must be positive, got {target_size}")
    image = minmax(resize_image(sample.image[0], (h, w)))
    mask = resize_mask(sample.mask[0], (h, w))
    return replace(sample, image=image[None], mask=mask[None])


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    folds: list[list[str]]
    tallies: list[dict[str, int]] = field(default_factory=list)

    def fold_of(self) -> dict[str, int]:
        return {sid: k for k, ids in enumerate(self.folds) for sid in ids}

    def sizes(self) -> list[int]:
        return [len(f) for f in self.folds]


def make_folds(samples: list[SegmentationSample], k: int = 5, seed: int = 0) -> FoldSplit:
    """Class-stratified round-robin split.

    Each class is shuffled with ``seed`` and dealt onto the folds in turn; the
    deal continues where the previous class stopped, so fold sizes also stay
    within one of each other.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for s in samples:
        by_class.setdefault(s.cls, []).append(s.id)
    folds: list[list[str]] = [[] for _ in range(k)]
    tallies: list[Counter] = [Counter() for _ in range(k)]
    cursor = 0
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        if len(ids) < k:
            log.warning("class %s has %d samples, fewer than %d folds", cls, len(ids), k)
        for idx in rng.permutation(len(ids)):
            folds[cursor].append(ids[idx])
            tallies[cursor][cls] += 1
            cursor = (cursor + 1) % k
    return FoldSplit(folds, [dict(t) for t in tallies])


def write_manifest(split: FoldSplit, classes: dict[str, str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "fold", "class"])
        for k, ids in enumerate(split.folds):
            for sid in ids:
                w.writerow([sid, k, classes.get(sid, "benign")])


def read_manifest(path: str | Path) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        return {row["id"]: int(row["fold"]) for row in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# synthetic lesions


def synth_generate(
    count: int, size: int = 64, seed: int = 0, noise_level: float = 0.3
) -> list[SegmentationSample]:
    """Bright elliptical lesions on a multiplicative speckle background.

    Even indices are benign (smooth ellipse); odd indices are malignant, with
    the boundary radius modulated by a random low-order harmonic.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if not 0.0 <= noise_level < 1.0:
        raise ValueError(f"noise_level must lie in [0, 1), got {noise_level}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = []
    for n in range(count):
        malignant = n % 2 == 1
        a, b = rng.uniform(0.10, 0.35, size=2) * size
        amp = rng.uniform(0.06, 0.10) if malignant else 0.0
        lobes = int(rng.integers(3, 7))
        phase = rng.uniform(0, 2 * np.pi)
        reach = max(a, b) * (1 + amp)
        cy, cx = rng.uniform(reach, size - reach, size=2)
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        r = np.hypot(u / a, v / b)
        ang = np.arctan2(v / b, u / a)
        mask = (r <= 1.0 + amp * np.sin(lobes * ang + phase)).astype(np.float64)
        background = rng.uniform(0.2, 0.4)
        lesion = background + rng.uniform(0.25, 0.4)
        clean = np.where(mask > 0, lesion, background)
        factor = rng.uniform(1 - noise_level, 1 + noise_level, size=(size, size))
        if noise_level > 0:
            factor = gaussian_filter(factor, sigma=0.7, mode="reflect")
        image = np.clip(clean * factor, 0.0, 1.0)
        out.append(
            SegmentationSample(
                f"synth_{n:04d}", image[None], mask[None], "malignant" if malignant else "benign"
            )
        )
    return out


def stack(samples: list[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(B x 1 x H x W images, B x 1 x H x W masks)``."""
    return (
        np.stack([s.image for s in samples]).astype(np.float64),
        np.stack([s.mask for s in samples]).astype(np.float64),
    )
