"""Dataset discovery, image preprocessing and the synthetic fixture generator.

Datasets follow the layout ``root/{train,val,test}/<CLASS>/*.png|jpg``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import bilinear_resize

logger = logging.getLogger(__name__)

CLASSES = ("COVID19", "NORMAL", "PNEUMONIA", "TUBERCULOSIS")
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_PER_CLASS = {"train": 50, "val": 20, "test": 20}
CONFOUND_CLASS = 1


class DatasetError(ValueError):
    """Dataset directory does not follow the split/class layout."""


class ImageDecodeError(IOError):
    """An image file could not be decoded."""


@dataclass
class DatasetManifest:
    root: str
    classes: tuple = CLASSES
    files: dict = field(default_factory=dict)  # split -> class -> [relative paths]

    def count(self, split, cls):
        return len(self.files.get(split, {}).get(cls, []))

    def split_size(self, split):
        return sum(self.count(split, c) for c in self.classes)

    @property
    def total(self):
        return sum(self.split_size(s) for s in self.files)

    def items(self, split):
        """``[(path, label), ...]`` for a split, ordered by class then file name."""
        out = []
        for label, cls in enumerate(self.classes):
            for rel in self.files.get(split, {}).get(cls, []):
                out.append((os.path.join(self.root, rel), label))
        return out

    def to_json(self):
        return json.dumps({"format_version": 1, "root": self.root,
                           "classes": list(self.classes), "files": self.files},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["root"], tuple(d["classes"]), d["files"])


def scan_dataset(root, classes=CLASSES):
    """List every image under ``root`` by split and class.

    Missing split directories and unknown class directories raise
    :class:`DatasetError`; missing or empty class directories only warn.
    """
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} is not a directory")
    missing = [s for s in SPLITS if not os.path.isdir(os.path.join(root, s))]
    if missing:
        raise DatasetError(f"dataset root {root!r} is missing split directories: {missing}")
    files = {}
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        subdirs = sorted(d for d in os.listdir(split_dir)
                         if os.path.isdir(os.path.join(split_dir, d)))
        unknown = [d for d in subdirs if d not in classes]
        if unknown:
            raise DatasetError(f"unknown class directories in {split_dir!r}: {unknown}")
        files[split] = {}
        for cls in classes:
            cls_dir = os.path.join(split_dir, cls)
            names = []
            if os.path.isdir(cls_dir):
                names = sorted(n for n in os.listdir(cls_dir)
                               if n.lower().endswith(IMAGE_SUFFIXES))
            if not names:
                logger.warning("no images in %s", cls_dir)
            files[split][cls] = [os.path.join(split, cls, n) for n in names]
    return DatasetManifest(root, tuple(classes), files)


def class_distribution(manifest):
    """Per-class split counts, totals and share of the whole dataset (percent)."""
    total = manifest.total
    rows = []
    for cls in manifest.classes:
        counts = {s: manifest.count(s, cls) for s in SPLITS}
        n = sum(counts.values())
        rows.append({"class": cls, **counts, "total": n,
                     "percent": 100.0 * n / total if total else 0.0})
    rows.append({"class": "Total", **{s: manifest.split_size(s) for s in SPLITS},
                 "total": total, "percent": 100.0 if total else 0.0})
    return rows


def format_distribution(rows):
    header = f"{'Class':<14}{'Train':>8}{'Val':>8}{'Test':>8}{'Total':>8}{'Share':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        if r["class"] == "Total":
            lines.append("-" * len(header))
        lines.append(f"{r['class']:<14}{r['train']:>8}{r['val']:>8}{r['test']:>8}"
                     f"{r['total']:>8}{r['percent']:>8.1f}%")
    return "\n".join(lines)


# -- preprocessing -----------------------------------------------------------

@dataclass(frozen=True)
class PreprocessSpec:
    """Target size, value range (``"unit"`` = [0, 1], ``"raw"`` = [0, 255])
    and channel count (3 replicates grayscale)."""

    size: int = 64
    value_range: str = "unit"
    channels: int = 3

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"size must be positive, got {self.size}")
        if self.value_range not in ("unit", "raw"):
            raise ValueError(f"value_range must be 'unit' or 'raw', got {self.value_range!r}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def bounds(self):
        return (0.0, 1.0) if self.value_range == "unit" else (0.0, 255.0)

    def to_dict(self):
        return {"size": self.size, "value_range": self.value_range, "channels": self.channels}


def default_preprocess(template, size=64):
    """Unit range for every template except mini_effnet_head, which takes raw pixels."""
    return PreprocessSpec(size, "raw" if template == "mini_effnet_head" else "unit", 3)


@dataclass
class ImageBatch:
    tensor: np.ndarray
    labels: np.ndarray
    files: list

    def __len__(self):
        return len(self.labels)


def decode_image(path, spec):
    """Decode, resize and scale one image to a (C, size, size) float32 array."""
    try:
        with Image.open(path) as im:
            im.load()
            if spec.channels == 1:
                arr = np.asarray(im.convert("L"), dtype=np.float32)[None]
            else:
                mode = "RGB" if im.mode in ("RGB", "RGBA", "P", "CMYK") else "L"
                arr = np.asarray(im.convert(mode), dtype=np.float32)
                arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageDecodeError(f"cannot decode image {os.fspath(path)!r}: {exc}") from exc
    if arr.shape[1:] != (spec.size, spec.size):
        arr = bilinear_resize(arr, spec.size, spec.size)
    if spec.value_range == "unit":
        arr = arr / np.float32(255.0)
    if spec.channels == 3 and arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return np.ascontiguousarray(arr, dtype=np.float32)


def load_batch(manifest, split, indices, spec):
    items = manifest.items(split)
    if any(i < 0 or i >= len(items) for i in indices):
        raise IndexError(f"indices out of range for split {split!r} of size {len(items)}")
    chosen = [items[i] for i in indices]
    tensor = np.stack([decode_image(p, spec) for p, _ in chosen]) if chosen else \
        np.zeros((0, spec.channels, spec.size, spec.size), dtype=np.float32)
    return ImageBatch(tensor, np.array([l for _, l in chosen], dtype=np.int64),
                      [p for p, _ in chosen])


def load_split(manifest, split, spec):
    return load_batch(manifest, split, range(manifest.split_size(split)), spec)


# -- synthetic fixture -------------------------------------------------------

def marker_box(size):
    """``(row0, row1, col0, col1)`` of the confound marker in the top-left corner."""
    side = max(2, size // 8)
    off = max(1, size // 32)
    return off, off + side, off, off + side


def corner_region(size):
    """Top-left square (side ``size // 4``) that contains the marker."""
    side = max(3, size // 4)
    return 0, side, 0, side


def _gaussian(size, cy, cx, sigma):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))


def _ramp(size, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1) - 0.5
    return np.cos(angle) * xx + np.sin(angle) * yy


def synth_image(cls, size, rng, marker=False):
    """Procedural grayscale image (uint8) for class index ``cls``.

    0: patches of high-frequency speckle; 1: strong smooth intensity ramp;
    2: a few mid-sized diffuse blobs; 3: several small bright nodules. All classes
    share a random base level, a weak ramp and additive noise.
    """
    img = np.full((size, size), 105.0 + rng.uniform(-15, 15))
    img += 25.0 * _ramp(size, rng.uniform(0, 2 * np.pi))
    structure = np.zeros((size, size))
    if cls == 0:
        for _ in range(rng.integers(2, 4)):
            side = int(rng.integers(size // 5, size // 3 + 1))
            r, c = rng.integers(0, size - side, size=2)
            structure[r:r + side, c:c + side] += rng.normal(0, 40, size=(side, side))
    elif cls == 1:
        structure += 90.0 * _ramp(size, rng.uniform(0, 2 * np.pi))
    elif cls == 2:
        for _ in range(rng.integers(2, 4)):
            cy, cx = rng.uniform(0.2, 0.8, size=2) * size
            structure += 70.0 * _gaussian(size, cy, cx, rng.uniform(size / 10, size / 7))
    elif cls == 3:
        for _ in range(rng.integers(4, 8)):
            cy, cx = rng.uniform(0.1, 0.9, size=2) * size
            structure += 90.0 * _gaussian(size, cy, cx, rng.uniform(size / 40, size / 24))
    else:
        raise ValueError(f"no procedural recipe for class {cls}")
    img += structure
    img += rng.normal(0, 6, size=img.shape)
    if marker:
        r0, r1, c0, c1 = marker_box(size)
        img[r0:r1, c0:c1] = 255.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gen_fixture(out_root, per_class_counts=None, image_size=64, seed=0, with_confound=False,
                classes=CLASSES, confound_class=CONFOUND_CLASS):
    """Write a deterministic synthetic dataset under ``out_root``.

    ``per_class_counts`` maps split name to images per class (default 50/20/20).
    With ``with_confound`` every image of ``confound_class`` carries a bright
    square marker in its top-left corner (see :func:`marker_box`).
    Returns the scanned manifest.
    """
    counts = dict(DEFAULT_PER_CLASS if per_class_counts is None else per_class_counts)
    if set(counts) - set(SPLITS):
        raise ValueError(f"unknown splits {sorted(set(counts) - set(SPLITS))}")
    out_root = Path(out_root)
    for s_idx, split in enumerate(SPLITS):
        for c_idx, cls in enumerate(classes):
            d = out_root / split / cls
            d.mkdir(parents=True, exist_ok=True)
            for i in range(counts.get(split, 0)):
                rng = np.random.default_rng([seed, s_idx, c_idx, i])
                marked = with_confound and c_idx == confound_class
                img = synth_image(c_idx, image_size, rng, marker=marked)
                Image.fromarray(img).save(d / f"{cls.lower()}_{split}_{i:04d}.png")
    return scan_dataset(out_root, classes)
