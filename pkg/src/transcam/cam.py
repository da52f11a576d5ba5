"""Class activation maps and their attention-based refinement.

All functions work on a single sample. Maps are Tensors of shape
(K, g, g) for ``K`` foreground classes on a ``g x g`` patch grid, and
attention matrices are (1+N, 1+N) with the class token at index 0 or
(N, N) once the class token is removed. Every operation is composed from
differentiable kernels, so gradients flow through the whole refinement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .conformer import AttentionStack
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor

COUPLING_MODES = ("cam", "clsattn", "attnagg", "transcam")
RANGE_MODES = ("AS", "AD", "AA")


@dataclass
class ClassActivationMap:
    per_class: Tensor
    refined: bool = False
    normalized: bool = False

    @property
    def num_classes(self) -> int:
        return self.per_class.shape[0]

    def numpy(self) -> np.ndarray:
        return self.per_class.data


@dataclass
class AttentionMap:
    matrix: Tensor
    source_range: tuple[int, int] = (1, 1)


@dataclass
class PseudoLabelMap:
    labels: np.ndarray


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _grid_side(n: int) -> int:
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"{n} tokens do not form a square grid")
    return g


def compute_cam(features, head_weights) -> ClassActivationMap:
    """Project (f_c, g, g) features through (f_c, K) classifier weights."""
    f, theta = _as_tensor(features), _as_tensor(head_weights)
    if f.ndim != 3 or theta.ndim != 2 or f.shape[0] != theta.shape[0]:
        raise ShapeError(f"compute_cam: features {f.dims} and weights {theta.dims} disagree on channels")
    fc, h, w = f.shape
    k = theta.shape[1]
    flat = T.reshape(f, (fc, h * w))
    m = T.matmul(T.transpose(theta, (1, 0)), flat)
    return ClassActivationMap(T.reshape(m, (k, h, w)))


def average_heads(attn) -> Tensor:
    """(S, T, T) per-head attention -> (T, T) mean over heads."""
    a = _as_tensor(attn)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ShapeError(f"average_heads expects (S, T, T), got {a.dims}")
    return T.mean(a, axis=0)


def block_range(mode: str, num_blocks: int) -> tuple[int, int]:
    """1-based inclusive block interval for AS (first half), AD (second half) or AA (all)."""
    half = num_blocks // 2
    ranges = {"AS": (1, half), "AD": (half + 1, num_blocks), "AA": (1, num_blocks)}
    try:
        lo, hi = ranges[mode.upper()]
    except KeyError:
        raise ConfigError(f"unknown attention range {mode!r}; expected one of {RANGE_MODES}") from None
    if lo > hi:
        raise ConfigError(f"range {mode} is empty for {num_blocks} blocks")
    return lo, hi


def average_blocks(stack: AttentionStack | Sequence, rng: tuple[int, int] | str) -> Tensor:
    """Mean of the head-averaged attention over blocks ``rng`` (1-based, inclusive)."""
    blocks = stack.per_block if isinstance(stack, AttentionStack) else list(stack)
    if isinstance(rng, str):
        rng = block_range(rng, len(blocks))
    lo, hi = rng
    if not 1 <= lo <= hi <= len(blocks):
        raise ConfigError(f"block range {rng} is empty or outside [1, {len(blocks)}]")
    chosen = [_as_tensor(b) for b in blocks[lo - 1:hi]]
    acc = chosen[0]
    for b in chosen[1:]:
        acc = T.add(acc, b)
    return T.scale(acc, 1.0 / len(chosen))


def slice_class_token(a_bar, source_range: tuple[int, int] = (1, 1)) -> AttentionMap:
    """Drop the class-token row and column: (1+N, 1+N) -> (N, N)."""
    a = _as_tensor(a_bar)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square attention matrix, got {a.dims}")
    if a.shape[0] < 2:
        raise ConfigError("attention matrix has no patch tokens")
    return AttentionMap(a[1:, 1:], source_range)


def _check_pair(a: Tensor, m: ClassActivationMap) -> tuple[int, int, int]:
    k, h, w = m.per_class.shape
    n = h * w
    if a.ndim != 2 or a.shape != (n, n):
        raise ShapeError(f"attention {a.dims} does not match a {h}x{w} map ({n} tokens)")
    return k, h, w


def refine(a_star: AttentionMap | Tensor, cam: ClassActivationMap) -> ClassActivationMap:
    """Propagate each class map through the patch affinity matrix.

    Per class, the map is flattened row-major to a length-N vector ``m`` and
    replaced by ``A* @ m``.
    """
    a = a_star.matrix if isinstance(a_star, AttentionMap) else _as_tensor(a_star)
    k, h, w = _check_pair(a, cam)
    flat = T.reshape(cam.per_class, (k, h * w))
    out = T.transpose(T.matmul(a, T.transpose(flat, (1, 0))), (1, 0))
    return replace(cam, per_class=T.reshape(out, (k, h, w)), refined=True, normalized=False)


def cls_attn(a_bar, cam: ClassActivationMap) -> ClassActivationMap:
    """Hadamard product of each class map with the class token's attention over patches."""
    a = _as_tensor(a_bar)
    k, h, w = cam.per_class.shape
    if a.ndim != 2 or a.shape != (1 + h * w, 1 + h * w):
        raise ShapeError(f"attention {a.dims} does not match a {h}x{w} map plus class token")
    weights = T.reshape(a[0:1, 1:], (1, h, w))
    weights = T.broadcast_to(weights, (k, h, w))
    return replace(cam, per_class=T.mul(weights, cam.per_class), refined=True, normalized=False)


def attn_agg(a_star: AttentionMap | Tensor, cam: ClassActivationMap) -> ClassActivationMap:
    """Activation-weighted sum of each token's attention profile.

    Token ``i`` contributes its outgoing attention row scaled by the class
    score at patch ``i``, i.e. ``A*^T @ m``.
    """
    a = a_star.matrix if isinstance(a_star, AttentionMap) else _as_tensor(a_star)
    return refine(T.transpose(a, (1, 0)), cam)


def normalize_cam(cam: ClassActivationMap) -> ClassActivationMap:
    """Per-plane min-max scaling to [0, 1]; constant planes become zero."""
    m = cam.per_class
    k = m.shape[0]
    flat = m.data.reshape(k, -1)
    lo = flat.min(axis=1)
    span = flat.max(axis=1) - lo
    # constant planes have a zero numerator, so any nonzero divisor maps them to 0
    safe = np.where(span > 0, span, 1.0)
    shift = np.broadcast_to(lo.reshape(k, 1, 1), m.shape).astype(m.dtype)
    divisor = np.broadcast_to(safe.reshape(k, 1, 1), m.shape).astype(m.dtype)
    # min/max are treated as constants for gradients (subgradient choice)
    out = T.div(T.sub(m, Tensor(shift)), Tensor(divisor))
    return replace(cam, per_class=out, normalized=True)


def pseudo_label(cam_norm: ClassActivationMap | np.ndarray, tau: float, out_size: tuple[int, int]) -> PseudoLabelMap:
    """Resize normalized maps to ``out_size``, prepend a constant-``tau`` background
    plane, and take the per-pixel argmax (ties go to the lower index)."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    planes = cam_norm.per_class.data if isinstance(cam_norm, ClassActivationMap) else np.asarray(cam_norm)
    oh, ow = int(out_size[0]), int(out_size[1])
    if planes.shape[0] == 0:
        return PseudoLabelMap(np.zeros((oh, ow), dtype=np.int64))
    up = T.resize_bilinear(Tensor(planes), (oh, ow)).data
    stacked = np.concatenate([np.full((1, oh, ow), tau, dtype=up.dtype), up], axis=0)
    return PseudoLabelMap(np.argmax(stacked, axis=0).astype(np.int64))


def multiscale_fuse(maps: Sequence[ClassActivationMap], out_size: tuple[int, int]) -> ClassActivationMap:
    """Resize every map to ``out_size``, average, then min-max normalize."""
    if not maps:
        raise ConfigError("multiscale_fuse needs at least one map")
    acc = None
    for m in maps:
        r = T.resize_bilinear(m.per_class, out_size)
        acc = r if acc is None else T.add(acc, r)
    acc = T.scale(acc, 1.0 / len(maps))
    return normalize_cam(ClassActivationMap(acc, refined=all(m.refined for m in maps)))


def coupled_cam(mode: str, cam: ClassActivationMap, stack: AttentionStack, rng: str | tuple[int, int] = "AA") -> ClassActivationMap:
    """Apply one coupling method to a raw CAM using attention averaged over ``rng``."""
    mode = mode.lower()
    if mode == "cam":
        return cam
    if mode not in COUPLING_MODES:
        raise ConfigError(f"unknown coupling mode {mode!r}; expected one of {COUPLING_MODES}")
    if isinstance(rng, str):
        rng = block_range(rng, len(stack))
    a_bar = average_blocks(stack, rng)
    if mode == "clsattn":
        return cls_attn(a_bar, cam)
    a_star = slice_class_token(a_bar, rng)
    if mode == "attnagg":
        return attn_agg(a_star, cam)
    return refine(a_star, cam)
