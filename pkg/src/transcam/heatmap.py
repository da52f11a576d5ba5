"""Color-mapped exports of class maps and attention rows."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .cam import COUPLING_MODES, RANGE_MODES, average_blocks, block_range, slice_class_token
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor


def _build_colormap() -> np.ndarray:
    i = np.arange(256, dtype=np.int64)
    red = i
    blue = 255 - i
    green = 255 - np.abs(2 * i - 255)
    green = (green * 3) // 4
    return np.stack([red, green, blue], axis=1).astype(np.uint8)


# blue at 0, red at 255; integer arithmetic keeps the table identical everywhere
COLORMAP = _build_colormap()


def normalize_plane(plane: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant plane maps to zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo)


def colorize(plane01: np.ndarray) -> np.ndarray:
    """(H, W) values in [0, 1] -> (H, W, 3) uint8 through the fixed table."""
    idx = np.clip(np.rint(np.asarray(plane01, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    return COLORMAP[idx]


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a uint8 heat image over a uint8 image or a float image in [0, 1]; result clamps to [0, 255]."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"overlay alpha must lie in [0, 1], got {alpha}")
    raw = np.asarray(image)
    base = raw.astype(np.float64)
    if raw.dtype != np.uint8:
        base = base * 255.0
    if base.shape != heat.shape:
        raise ShapeError(f"image {list(base.shape)} and heatmap {list(heat.shape)} differ")
    mixed = (1.0 - alpha) * base + alpha * heat.astype(np.float64)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def attention_row(attn_blocks: Sequence, ref_pixel: tuple[int, int], image_size: int,
                  attn_range: str = "AA") -> np.ndarray:
    """Attention paid by the patch containing ``ref_pixel`` to every patch, resized to the image.

    ``attn_blocks`` holds per-block (1+N, 1+N) matrices of one sample.
    """
    y, x = int(ref_pixel[0]), int(ref_pixel[1])
    if not (0 <= y < image_size and 0 <= x < image_size):
        raise ConfigError(f"reference pixel {ref_pixel} lies outside a {image_size}x{image_size} image")
    rng = block_range(attn_range, len(attn_blocks))
    a_star = slice_class_token(average_blocks(attn_blocks, rng), rng).matrix.data
    n = a_star.shape[0]
    g = int(round(np.sqrt(n)))
    patch = image_size // g
    row = a_star[(y // patch) * g + (x // patch)].reshape(1, g, g)
    return T.resize_bilinear(Tensor(row), (image_size, image_size)).data[0]


def write_png(path: Path, rgb: np.ndarray) -> Path:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path)
    return path


def render_stages(image: np.ndarray, stage_maps: dict[str, np.ndarray], out_dir: str | Path,
                  class_names: Sequence[str], alpha: float = 0.5) -> list[Path]:
    """One PNG per class per stage from (K, H, W) maps; each plane is re-normalized before color-mapping."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for stage, maps in stage_maps.items():
        if maps.shape[0] != len(class_names):
            raise ShapeError(f"stage {stage} has {maps.shape[0]} planes for {len(class_names)} classes")
        for c, name in enumerate(class_names):
            heat = colorize(normalize_plane(maps[c]))
            paths.append(write_png(out_dir / f"{stage}_{name}.png", overlay(image, heat, alpha)))
    return paths


def export_heatmaps(model, image: np.ndarray, out_dir: str | Path, class_names: Sequence[str],
                    stages: Sequence[str] = COUPLING_MODES, attn_range: str = "AA",
                    ref_pixel: tuple[int, int] | None = None, ref_ranges: Sequence[str] = RANGE_MODES,
                    alpha: float = 0.5, scales: Sequence[float] = (1.0,)) -> list[Path]:
    """Write class heatmaps for every requested stage and, with ``ref_pixel``, attention rows."""
    from .train import cam_maps

    image = np.asarray(image, dtype=np.float64)
    size = image.shape[0]
    if image.ndim != 3 or image.shape[1] != size:
        raise ShapeError(f"expected a square (H, W, 3) image, got {list(image.shape)}")
    if ref_pixel is not None and not (0 <= ref_pixel[0] < size and 0 <= ref_pixel[1] < size):
        raise ConfigError(f"reference pixel {tuple(ref_pixel)} lies outside a {size}x{size} image")
    unknown = [s for s in stages if s not in COUPLING_MODES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; expected a subset of {COUPLING_MODES}")
    variants = [(s, attn_range.upper()) for s in stages]
    maps = cam_maps(model, image[None], scales, variants)
    paths = render_stages(image, {v[0]: maps[v][0] for v in variants}, out_dir, class_names, alpha)
    if ref_pixel is not None:
        fo = model(image[None].astype(model.dtype), training=False)
        stack = fo.attn.for_sample(0).per_block
        for mode in ref_ranges:
            row = attention_row(stack, ref_pixel, size, mode)
            heat = colorize(normalize_plane(row))
            name = f"attn_{mode.upper()}_y{ref_pixel[0]}_x{ref_pixel[1]}.png"
            paths.append(write_png(Path(out_dir) / name, overlay(image, heat, alpha)))
    return paths
