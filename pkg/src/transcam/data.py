"""Synthetic shapes dataset: generation, loading and training augmentation.

Each image shows one to three shapes (disk, rectangle, triangle) in random
colors on a textured background, so the class can only be read off the
outline. Layout on disk::

    root/images/<stem>.png   8-bit RGB
    root/masks/<stem>.png    8-bit label indices (0 = background)
    root/manifest.json
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .exceptions import ConfigError, DatasetError
from .tensor import bilinear_matrix

SHAPES = ("disk", "rectangle", "triangle")
MANIFEST_VERSION = 1


@dataclass
class SampleRecord:
    image: np.ndarray
    label: np.ndarray
    mask: np.ndarray | None = None
    stem: str = ""


@dataclass
class DatasetManifest:
    root: Path
    split: str
    stems: list[str]
    classes: list[str]
    seed: int
    size: int
    labels: dict[str, list[int]] = field(default_factory=dict)
    class_probs: list[float] | None = None
    version: int = MANIFEST_VERSION

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return len(self.stems)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "split": self.split,
            "classes": list(self.classes),
            "size": self.size,
            "seed": self.seed,
            "stems": list(self.stems),
            "class_probs": self.class_probs,
            "labels": {s: list(map(int, self.labels[s])) for s in self.stems if s in self.labels},
        }

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root: str | os.PathLike) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        if raw.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {raw.get('version')!r} in {path}")
        stems = list(raw["stems"])
        if len(set(stems)) != len(stems):
            raise DatasetError(f"duplicate stems in {path}")
        return cls(root=path.parent, split=raw["split"], stems=stems, classes=list(raw["classes"]),
                   seed=int(raw["seed"]), size=int(raw["size"]), labels=raw.get("labels", {}),
                   class_probs=raw.get("class_probs"))


@dataclass
class GeneratorSpec:
    n: int = 400
    classes: Sequence[str] = SHAPES
    size: int = 64
    seed: int = 0
    split: str = "train"
    class_probs: Sequence[float] | None = None
    max_shapes: int = 3
    radius_range: tuple[float, float] = (0.2, 0.3)

    def validate(self) -> None:
        if not self.classes:
            raise ConfigError("need at least one shape class")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ConfigError(f"unknown shape classes {sorted(unknown)}; choose from {SHAPES}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("shape classes must be distinct")
        if self.size < 16:
            raise ConfigError(f"image size must be >= 16, got {self.size}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi or hi * self.size + 2 >= self.size / 2:
            raise ConfigError(f"radius_range {self.radius_range} must satisfy 0 < lo <= hi and leave a margin "
                              f"inside a {self.size}px image")
        if self.n < 0 or self.max_shapes < 1:
            raise ConfigError("n must be >= 0 and max_shapes >= 1")
        probs = self.probs()
        if len(probs) != len(self.classes) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ConfigError(f"class_probs must be {len(self.classes)} non-negative numbers summing to 1")

    def probs(self) -> np.ndarray:
        if self.class_probs is None:
            return np.full(len(self.classes), 1.0 / len(self.classes))
        return np.asarray(self.class_probs, dtype=np.float64)


# ---------------------------------------------------------------- rendering

def _separable(rh: np.ndarray, img: np.ndarray, rw: np.ndarray) -> np.ndarray:
    """Apply row operator ``rh`` and column operator ``rw`` to an (H, W, C) image."""
    tmp = np.tensordot(rh, img, axes=(1, 0))
    return np.tensordot(tmp, rw, axes=(1, 1)).transpose(0, 2, 1)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    c0, c1 = rng.uniform(0.1, 0.5, size=(2, 3))
    img = c0 + ramp[..., None] * (c1 - c0)
    coarse = rng.normal(0, 0.08, size=(size // 8, size // 8, 3))
    r = bilinear_matrix(size // 8, size)
    img = img + _separable(r, coarse, r)
    img = img + rng.normal(0, 0.04, size=img.shape)
    return img


def _shape_mask(kind: str, rng: np.random.Generator, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "rectangle":
        hw, hh = r * rng.uniform(0.7, 1.0), r * rng.uniform(0.7, 1.0)
        return (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
    rot = rng.uniform(0, 2 * np.pi)
    verts = [(cx + r * np.cos(rot + k * 2 * np.pi / 3), cy + r * np.sin(rot + k * 2 * np.pi / 3)) for k in range(3)]
    sides = [(x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
             for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1])]
    pos = np.all([s >= 0 for s in sides], axis=0)
    neg = np.all([s <= 0 for s in sides], axis=0)
    return pos | neg


def _shape_color(rng: np.random.Generator, bg_lum: float) -> np.ndarray:
    """Random hue, luminance 0.35 to 0.5 above the local background."""
    lum = min(bg_lum + rng.uniform(0.35, 0.5), 0.95)
    chroma = rng.uniform(-0.2, 0.2, size=3)
    chroma -= chroma.mean()
    return np.clip(lum + chroma, 0.0, 1.0)


def render_sample(spec: GeneratorSpec, index: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Deterministically draw sample ``index``: (uint8 image, uint8 mask, instance classes)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.size
    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    probs = spec.probs()
    count = int(rng.integers(1, spec.max_shapes + 1))
    placed: list[tuple[float, float, float]] = []
    instances = []
    for _ in range(count):
        cls = int(rng.choice(len(spec.classes), p=probs))
        for _attempt in range(50):
            r = rng.uniform(*spec.radius_range) * size
            margin = r + 2
            cx, cy = rng.uniform(margin, size - margin, size=2)
            if all((cx - px) ** 2 + (cy - py) ** 2 > (r + pr + 3) ** 2 for px, py, pr in placed):
                break
        else:
            continue
        region = _shape_mask(spec.classes[cls], rng, size, cx, cy, r)
        if region.sum() < 16:
            continue
        color = _shape_color(rng, float(img[region].mean()))
        img[region] = color + rng.normal(0, 0.03, size=(int(region.sum()), 3))
        mask[region] = cls + 1
        placed.append((cx, cy, r))
        instances.append(cls)
    if not instances:
        # first placement on an empty canvas cannot fail; keep the invariant explicit
        raise RuntimeError("sample rendered without any shape")
    img8 = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return img8, mask, instances


def labels_from_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    present = np.zeros(num_classes, dtype=np.int64)
    for c in np.unique(mask):
        if c > 0:
            present[int(c) - 1] = 1
    return present


def generate_dataset(spec: GeneratorSpec, root: str | os.PathLike) -> DatasetManifest:
    """Render ``spec.n`` samples under ``root`` and write the manifest."""
    spec.validate()
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directories under {root}: {exc}") from exc
    width = max(5, len(str(max(spec.n - 1, 0))))
    stems, labels = [], {}
    for i in range(spec.n):
        stem = f"{spec.split}_{i:0{width}d}"
        img, mask, _ = render_sample(spec, i)
        try:
            Image.fromarray(img).save(root / "images" / f"{stem}.png")
            Image.fromarray(mask).save(root / "masks" / f"{stem}.png")
        except OSError as exc:
            raise DatasetError(f"cannot write sample {stem}: {exc}") from exc
        stems.append(stem)
        labels[stem] = labels_from_mask(mask, len(spec.classes)).tolist()
    manifest = DatasetManifest(root=root, split=spec.split, stems=stems, classes=list(spec.classes),
                               seed=spec.seed, size=spec.size, labels=labels,
                               class_probs=[float(p) for p in spec.probs()])
    manifest.save()
    return manifest


# ---------------------------------------------------------------- loading

def _read_png(path: Path, stem: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"sample {stem!r}: cannot read {path}: {exc}") from exc


def load_sample(manifest: DatasetManifest, stem: str, with_mask: bool = True) -> SampleRecord:
    root = Path(manifest.root)
    image = _read_png(root / "images" / f"{stem}.png", stem, "RGB").astype(np.float64) / 255.0
    mask = None
    mask_path = root / "masks" / f"{stem}.png"
    if with_mask and mask_path.exists():
        mask = _read_png(mask_path, stem, "L").astype(np.int64)
        if mask.shape != image.shape[:2]:
            raise DatasetError(f"sample {stem!r}: mask extent {mask.shape} differs from image {image.shape[:2]}")
    if stem in manifest.labels:
        label = np.asarray(manifest.labels[stem], dtype=np.int64)
    elif mask is not None:
        label = labels_from_mask(mask, manifest.num_classes)
    else:
        raise DatasetError(f"sample {stem!r}: no label in manifest and no mask on disk")
    return SampleRecord(image=image, label=label, mask=mask, stem=stem)


def load_dataset(manifest: DatasetManifest, shuffle_seed: int | None = None,
                 with_masks: bool = True) -> Iterator[SampleRecord]:
    """Lazily yield samples in sorted-stem order, or a seeded permutation of it."""
    stems = sorted(manifest.stems)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(stems))
        stems = [stems[i] for i in order]
    for stem in stems:
        yield load_sample(manifest, stem, with_masks)


def load_arrays(manifest: DatasetManifest, with_masks: bool = True):
    """Whole split as arrays: images (n, H, W, 3), labels (n, K), masks (n, H, W) or None."""
    records = list(load_dataset(manifest, with_masks=with_masks))
    size = manifest.size
    k = manifest.num_classes
    if not records:
        return np.zeros((0, size, size, 3)), np.zeros((0, k), dtype=np.int64), None
    images = np.stack([r.image for r in records])
    labels = np.stack([r.label for r in records])
    masks = None
    if with_masks and all(r.mask is not None for r in records):
        masks = np.stack([r.mask for r in records])
    return images, labels, masks


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    scale_range: tuple[float, float] = (1.0, 1.25)
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    crop_size: int = 64


def _resize_image(img: np.ndarray, out: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out, out):
        return img
    rh, rw = bilinear_matrix(h, out), bilinear_matrix(w, out)
    return _separable(rh, img, rw)


def _resize_nearest(mask: np.ndarray, out: int) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == (out, out):
        return mask
    ri = np.minimum(((np.arange(out) + 0.5) * h / out).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(out) + 0.5) * w / out).astype(np.int64), w - 1)
    return mask[np.ix_(ri, ci)]


def augment(sample: SampleRecord, rng: np.random.Generator | int, config: AugmentConfig | None = None) -> SampleRecord:
    """Random rescale, horizontal flip, brightness/contrast jitter and crop.

    Geometric steps are applied identically to the mask (nearest neighbour).
    When a mask is present the label is recomputed from the cropped mask.
    """
    cfg = config or AugmentConfig()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    img, mask = sample.image, sample.mask
    h = img.shape[0]
    lo, hi = cfg.scale_range
    if not 0 < lo <= hi:
        raise ConfigError(f"invalid scale range {cfg.scale_range}")
    s = rng.uniform(lo, hi)
    new = int(round(h * s))
    if cfg.crop_size > new:
        raise ConfigError(f"crop {cfg.crop_size} is larger than the rescaled image ({new})")
    img = _resize_image(img, new)
    if mask is not None:
        mask = _resize_nearest(mask, new)
    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    b = rng.uniform(-cfg.brightness, cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    if b != 0 or c != 1:
        mu = img.mean()
        img = np.clip((img - mu) * c + mu + b, 0.0, 1.0)
    oy = int(rng.integers(0, new - cfg.crop_size + 1))
    ox = int(rng.integers(0, new - cfg.crop_size + 1))
    img = np.ascontiguousarray(img[oy:oy + cfg.crop_size, ox:ox + cfg.crop_size])
    label = sample.label
    if mask is not None:
        mask = np.ascontiguousarray(mask[oy:oy + cfg.crop_size, ox:ox + cfg.crop_size])
        label = labels_from_mask(mask, len(sample.label))
    return SampleRecord(image=img, label=label, mask=mask, stem=sample.stem)
