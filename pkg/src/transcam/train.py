"""Training, pseudo-label inference, mIoU evaluation, threshold sweeps and ablations."""
from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .cam import COUPLING_MODES, RANGE_MODES, compute_cam, coupled_cam, multiscale_fuse
from .conformer import ConformerConfig, MiniConformer, combine_logits, forward
from .data import AugmentConfig, DatasetManifest, SampleRecord, augment, load_arrays
from .exceptions import ConfigError, ContractError, NumericError, ShapeError
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
DEFAULT_TAU_GRID = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass
class RunConfig:
    model: ConformerConfig = field(default_factory=ConformerConfig)
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-5
    weight_decay: float = 5e-4
    w_conv: float = 0.5
    w_trans: float = 0.5
    tau: float = 0.5
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID
    scales: tuple[float, ...] = (0.5, 1.0, 1.5)
    attn_range: str = "AA"
    coupling: str = "transcam"
    seed: int = 0
    dtype: str = "float32"
    scale_range: tuple[float, float] = (1.0, 1.25)
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    use_image_labels: bool = True
    log_wall_time: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ConformerConfig.from_dict(self.model)
        self.tau_grid = tuple(float(t) for t in self.tau_grid)
        self.scales = tuple(float(s) for s in self.scales)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        self.validate()

    def validate(self) -> None:
        if self.w_conv < 0 or self.w_trans < 0:
            raise ConfigError("branch weights must be non-negative")
        if not self.tau_grid or any(not 0 <= t <= 1 for t in self.tau_grid):
            raise ConfigError("tau grid must be a non-empty subset of [0, 1]")
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.attn_range.upper() not in RANGE_MODES:
            raise ConfigError(f"attn_range must be one of {RANGE_MODES}")
        if self.coupling.lower() not in COUPLING_MODES:
            raise ConfigError(f"coupling must be one of {COUPLING_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        ps = self.model.patch_size
        for s in self.scales:
            side = round(self.model.image_size * s)
            if s <= 0 or side % ps or abs(side - self.model.image_size * s) > 1e-9:
                raise ConfigError(f"scale {s} gives side {self.model.image_size * s}, not a multiple of patch size {ps}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(scale_range=self.scale_range, flip_prob=self.flip_prob,
                             brightness=self.brightness, contrast=self.contrast,
                             crop_size=self.model.image_size)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        for k in ("tau_grid", "scales", "scale_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRow:
    epoch: int
    loss: float
    acc: float
    iou: list[float]
    miou: float
    seconds: float = 0.0


# ---------------------------------------------------------------- loss and optimizer

def soft_margin_loss(z: Tensor, y) -> Tensor:
    """Multi-label soft margin loss, averaged over classes (and over the batch if 2-D).

    Uses ``-log sigmoid(z) = softplus(-z)`` and ``-log(1 - sigmoid(z)) = softplus(z)``.
    """
    y = np.asarray(y, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"logits {z.dims} and labels {list(y.shape)} differ")
    pos = T.mul(T.softplus(T.scale(z, -1.0)), Tensor(y))
    neg = T.mul(T.softplus(z), Tensor(1.0 - y))
    return T.mean(T.add(pos, neg))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One AdamW update on plain arrays. Decay is decoupled: ``p *= 1 - lr * wd``."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ContractError(f"gradient {name!r} has dims {list(np.shape(g))}, parameter {list(np.shape(params[name]))}")
        for buf in (state.m, state.v):
            if name in buf and buf[name].shape != np.shape(params[name]):
                raise ContractError(f"optimizer state for {name!r} does not match the parameter")
    t = state.step + 1
    new_params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = p * (1.0 - lr * wd)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name] = m, v
    state.step = t
    return new_params, state


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay = lr, weight_decay
        self.betas, self.eps = betas, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new, self.state = adamw_step(values, grads, self.state, self.lr, self.weight_decay,
                                     self.betas[0], self.betas[1], self.eps)
        for k, p in self.params.items():
            if k in grads:
                p.assign_(new[k])


# ---------------------------------------------------------------- metrics

def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {list(pred.shape)} and truth {list(truth.shape)} differ")
    idx = num_classes * truth.reshape(-1).astype(np.int64) + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TCAM_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_miou(pseudo, truth, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both prediction and truth) and their mean.

    Class 0 is background and counts toward the mean.
    """
    pseudo = [np.asarray(p) for p in pseudo]
    truth = [np.asarray(t) for t in truth]
    if len(pseudo) != len(truth):
        raise ShapeError(f"{len(pseudo)} predictions for {len(truth)} masks")
    for p, t in zip(pseudo, truth):
        if p.shape != t.shape:
            raise ShapeError(f"prediction {list(p.shape)} and truth {list(t.shape)} differ")
    workers = _threads()
    if workers > 1 and len(pseudo) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda pt: confusion_matrix(pt[0], pt[1], num_classes), zip(pseudo, truth)))
        conf = np.sum(parts, axis=0) if parts else np.zeros((num_classes, num_classes), dtype=np.int64)
    else:
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        for p, t in zip(pseudo, truth):
            conf += confusion_matrix(p, t, num_classes)
    return iou_from_confusion(conf)


# ---------------------------------------------------------------- inference

def _resize_images(images: np.ndarray, side: int) -> np.ndarray:
    h = images.shape[1]
    if side == h:
        return images
    x = Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    return T.resize_bilinear(x, (side, side)).data.transpose(0, 2, 3, 1)


def predict_logits(model: MiniConformer, images: np.ndarray, w_conv: float, w_trans: float,
                   batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        fo = model(images[i:i + batch_size].astype(model.dtype), training=False)
        out.append(combine_logits(fo.z_conv, fo.z_trans, w_conv, w_trans).data)
    k = model.config.num_fg_classes
    return np.concatenate(out) if out else np.zeros((0, k))


Variant = tuple[str, str]


def cam_maps(model: MiniConformer, images: np.ndarray, scales: Sequence[float],
             variants: Sequence[Variant] = (("transcam", "AA"),), batch_size: int = 16,
             labels: np.ndarray | None = None) -> dict[Variant, np.ndarray]:
    """Fused, normalized class maps at input resolution for each (coupling, range) variant.

    Returns ``{variant: array (n, K, H, W)}``. When ``labels`` is given, planes
    of classes absent from an image's label are zeroed after normalization.
    """
    n, h = images.shape[0], images.shape[1]
    k = model.config.num_fg_classes
    theta = model.head_weights()
    results = {v: np.zeros((n, k, h, h), dtype=np.float32) for v in variants}
    for start in range(0, n, batch_size):
        chunk = images[start:start + batch_size]
        per_variant = {v: [[] for _ in range(len(chunk))] for v in variants}
        for s in scales:
            side = int(round(h * s))
            fo = model(_resize_images(chunk, side).astype(model.dtype), training=False)
            for j in range(len(chunk)):
                cam = compute_cam(fo.features[j], theta)
                stack = fo.attn.for_sample(j)
                for v in variants:
                    per_variant[v][j].append(coupled_cam(v[0], cam, stack, v[1]))
        for v in variants:
            for j, maps in enumerate(per_variant[v]):
                results[v][start + j] = multiscale_fuse(maps, (h, h)).per_class.data
    if labels is not None:
        gate = np.asarray(labels, dtype=np.float32)[:, :, None, None]
        for v in variants:
            results[v] *= gate
    return results


def labels_from_maps(maps: np.ndarray, tau: float) -> np.ndarray:
    """Batched pseudo labels for maps already at image resolution: (n, K, H, W) -> (n, H, W)."""
    n, _, h, w = maps.shape
    bg = np.full((n, 1, h, w), tau, dtype=maps.dtype)
    return np.argmax(np.concatenate([bg, maps], axis=1), axis=1)


def sweep_maps(maps: np.ndarray, masks: np.ndarray, grid: Sequence[float], num_classes: int) -> dict:
    """mIoU of pseudo labels for every tau in ``grid``; ties resolve to the lowest tau."""
    if len(grid) == 0:
        raise ConfigError("tau grid is empty")
    curve = []
    for tau in grid:
        _, miou = evaluate_miou(labels_from_maps(maps, tau), masks, num_classes)
        curve.append((float(tau), miou))
    best_tau, best = curve[0]
    for tau, miou in curve[1:]:
        if miou > best:
            best_tau, best = tau, miou
    return {"best_tau": best_tau, "best_miou": best, "curve": curve}


def tau_sweep(model: MiniConformer, config: RunConfig, manifest: DatasetManifest,
              grid: Sequence[float] | None = None, mode: str | None = None,
              attn_range: str | None = None) -> dict:
    """Best background threshold for pseudo labels on ``manifest`` plus the full curve."""
    grid = config.tau_grid if grid is None else tuple(grid)
    if len(grid) == 0:
        raise ConfigError("tau grid is empty")
    variant = ((mode or config.coupling).lower(), (attn_range or config.attn_range).upper())
    images, labels, masks = load_arrays(manifest)
    if masks is None:
        raise ContractError("tau sweep needs ground-truth masks")
    maps = cam_maps(model, images, config.scales, [variant],
                    labels=labels if config.use_image_labels else None)[variant]
    out = sweep_maps(maps, masks, grid, model.config.num_fg_classes + 1)
    out.update({"mode": variant[0], "attn_range": variant[1]})
    return out


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: MiniConformer
    metrics: list[MetricsRow]
    config: RunConfig


def _epoch_eval(model: MiniConformer, config: RunConfig, images, labels, masks) -> tuple[float, list[float], float]:
    logits = predict_logits(model, images, config.w_conv, config.w_trans)
    acc = float(((logits > 0).astype(np.int64) == labels).mean()) if len(labels) else float("nan")
    k = model.config.num_fg_classes
    if masks is None:
        return acc, [float("nan")] * (k + 1), float("nan")
    variant = (config.coupling.lower(), config.attn_range.upper())
    maps = cam_maps(model, images, (1.0,), [variant], labels=labels if config.use_image_labels else None)[variant]
    iou, miou = evaluate_miou(labels_from_maps(maps, config.tau), masks, k + 1)
    return acc, [float(x) for x in iou], miou


def train(config: RunConfig, train_data: DatasetManifest | tuple, eval_data: DatasetManifest | tuple | None = None,
          on_epoch: Callable[[MetricsRow], None] | None = None) -> TrainResult:
    """Minimize the soft margin loss on ``w_conv * z_conv + w_trans * z_trans``.

    ``train_data``/``eval_data`` are manifests or ``(images, labels[, masks])``
    tuples. Only image-level labels are used for optimization; masks of the
    evaluation split feed the per-epoch mIoU column. Everything random is drawn
    from one generator seeded with ``config.seed``.
    """
    images, labels = _as_arrays(train_data, with_masks=False)[:2]
    if eval_data is None:
        eval_images, eval_labels, eval_masks = _as_arrays(train_data, with_masks=True)
    else:
        eval_images, eval_labels, eval_masks = _as_arrays(eval_data, with_masks=True)
    k = config.model.num_fg_classes
    if labels.shape[1:] != (k,):
        raise ShapeError(f"labels have {labels.shape[1:]} classes, model expects {k}")
    rng = np.random.default_rng(config.seed)
    model = MiniConformer(config.model, seed=config.seed, dtype=config.np_dtype)
    opt = AdamW(model.params, config.lr, config.weight_decay)
    aug = config.augment_config()
    n = len(images)
    metrics = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [augment(SampleRecord(images[i], labels[i]), rng, aug) for i in idx]
            x = np.stack([b.image for b in batch]).astype(config.np_dtype)
            y = np.stack([b.label for b in batch])
            opt.zero_grad()
            with Graph() as graph:
                fo = model(x, training=True)
                z = combine_logits(fo.z_conv, fo.z_trans, config.w_conv, config.w_trans)
                loss = soft_margin_loss(z, y)
            value = loss.item()
            step += 1
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            graph.backward(loss)
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        acc, iou, miou = _epoch_eval(model, config, eval_images, eval_labels, eval_masks)
        elapsed = time.perf_counter() - t0
        row = MetricsRow(epoch, total / max(seen, 1), acc, iou, miou, elapsed if config.log_wall_time else 0.0)
        log.info("epoch %d loss %.4f acc %.4f miou %.4f (%.1fs)", epoch, row.loss, acc, miou, elapsed)
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(model, metrics, config)


def _as_arrays(data, with_masks: bool):
    if isinstance(data, DatasetManifest):
        return load_arrays(data, with_masks=with_masks)
    images, labels = np.asarray(data[0], dtype=np.float64), np.asarray(data[1], dtype=np.int64)
    masks = np.asarray(data[2]) if len(data) > 2 and data[2] is not None and with_masks else None
    return images, labels, masks


def metrics_csv(rows: Iterable[MetricsRow], class_names: Sequence[str]) -> str:
    """CSV text: epoch,loss,acc,iou_<class>...,miou,seconds (NaN for classes never seen)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "acc", *[f"iou_{c}" for c in ["background", *class_names]], "miou", "seconds"])
    for r in rows:
        w.writerow([r.epoch, _fmt(r.loss), _fmt(r.acc), *[_fmt(x) for x in r.iou], _fmt(r.miou), f"{r.seconds:.3f}"])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if x is None or np.isnan(x) else f"{x:.6f}"


# ---------------------------------------------------------------- ablations

WEIGHT_PAIRS = tuple((round(1 - 0.1 * i, 1), round(0.1 * i, 1)) for i in range(11))
ABLATION_COLUMNS = ("group", "method", "attn_range", "w_conv", "w_trans", "best_tau", "miou", "cam_best_tau", "cam_miou")


def expand_modes(modes: Sequence[str] | None) -> list[str]:
    """Expand the shorthands ``coupling``, ``range`` and ``weights`` into row identifiers."""
    if not modes:
        modes = ["coupling", "range", "weights"]
    out = []
    for m in modes:
        key = m.strip()
        if key.lower() == "coupling":
            out.extend(COUPLING_MODES)
        elif key.lower() == "range":
            out.extend(RANGE_MODES)
        elif key.lower() == "weights":
            out.extend(f"w={wc:.1f}" for wc, _ in WEIGHT_PAIRS)
        elif key.lower() in COUPLING_MODES or key.upper() in RANGE_MODES or key.lower().startswith("w="):
            out.append(key)
        else:
            raise ConfigError(f"unknown ablation mode {m!r}")
    return out


def ablation_runner(model: MiniConformer, config: RunConfig, manifest: DatasetManifest,
                    modes: Sequence[str] | None = None, train_manifest: DatasetManifest | None = None,
                    retrain_epochs: int | None = None) -> list[dict]:
    """Best-tau pseudo-label mIoU for coupling variants, block ranges and branch weights.

    Coupling and weight rows use ``config.attn_range``; range rows use TransCAM refinement.
    Each weight row (``w=<w_conv>``, with ``w_trans = 1 - w_conv``) retrains the
    network from scratch with that pair, except when the pair equals the one
    ``model`` was trained with.
    """
    rows_spec = expand_modes(modes)
    images, labels, masks = load_arrays(manifest)
    if masks is None:
        raise ContractError("ablations need ground-truth masks")
    gate = labels if config.use_image_labels else None
    nc = config.model.num_fg_classes + 1
    rng_mode = config.attn_range.upper()

    variants = []
    for r in rows_spec:
        if r.lower() in COUPLING_MODES:
            variants.append((r.lower(), rng_mode))
        elif r.upper() in RANGE_MODES:
            variants.append(("transcam", r.upper()))
    variants = list(dict.fromkeys(variants))
    cache = cam_maps(model, images, config.scales, variants, labels=gate) if variants else {}

    rows = []
    for r in rows_spec:
        if r.lower().startswith("w="):
            wc = float(r.split("=", 1)[1])
            if not 0 <= wc <= 1:
                raise ConfigError(f"w_conv must lie in [0, 1], got {wc}")
            wt = round(1 - wc, 10)
            if np.isclose(wc, config.w_conv) and np.isclose(wt, config.w_trans):
                m = model
            else:
                cfg = RunConfig.from_dict({**config.to_dict(), "w_conv": wc, "w_trans": wt,
                                           **({"epochs": retrain_epochs} if retrain_epochs is not None else {})})
                m = train(cfg, train_manifest or manifest, manifest).model
            tv, cv = ("transcam", rng_mode), ("cam", rng_mode)
            both = cam_maps(m, images, config.scales, [tv, cv], labels=gate)
            tc = sweep_maps(both[tv], masks, config.tau_grid, nc)
            base = sweep_maps(both[cv], masks, config.tau_grid, nc)
            rows.append({"group": "weights", "method": "transcam", "attn_range": rng_mode, "w_conv": wc, "w_trans": wt,
                         "best_tau": tc["best_tau"], "miou": tc["best_miou"],
                         "cam_best_tau": base["best_tau"], "cam_miou": base["best_miou"]})
            continue
        if r.lower() in COUPLING_MODES:
            variant, group = (r.lower(), rng_mode), "coupling"
        else:
            variant, group = ("transcam", r.upper()), "range"
        res = sweep_maps(cache[variant], masks, config.tau_grid, nc)
        rows.append({"group": group, "method": variant[0], "attn_range": variant[1],
                     "w_conv": config.w_conv, "w_trans": config.w_trans,
                     "best_tau": res["best_tau"], "miou": res["best_miou"],
                     "cam_best_tau": None, "cam_miou": None})
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([_cell(r[c]) for c in ABLATION_COLUMNS])
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


# ---------------------------------------------------------------- self check

def model_gradient_check(seed: int = 0, config: ConformerConfig | None = None, coords_per_param: int = 2,
                         step: float = 1e-5, w_conv: float = 0.5, w_trans: float = 0.5,
                         max_draws: int = 8) -> float:
    """Max relative error between autodiff and central differences for loss(forward(params)).

    Uses a float64 model on one random image with a random multi-hot label, in
    training mode with frozen running statistics. ``coords_per_param`` random
    coordinates of every parameter tensor are checked.

    A central difference with step ``h`` cannot resolve gradients much below
    ``eps * |loss| / h``; at such a coordinate the relative error measures
    rounding, not the gradient. A drawn coordinate whose autodiff and
    finite-difference values both fall under ``resolution / GRAD_TOLERANCE`` is
    therefore replaced by another draw from the same tensor (at most
    ``max_draws`` per slot; the last draw is kept when all are unresolvable).
    """
    cfg = config or ConformerConfig()
    rng = np.random.default_rng(seed)
    model = MiniConformer(cfg, seed=seed, dtype=np.float64)
    names = sorted(model.params)
    shapes = [model.params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = np.concatenate([model.params[n].data.ravel() for n in names])
    image = rng.random((1, cfg.image_size, cfg.image_size, 3))
    label = rng.integers(0, 2, size=(1, cfg.num_fg_classes))
    label[0, rng.integers(cfg.num_fg_classes)] = 1
    buffers = model.buffers

    def loss_of(vec: Tensor) -> Tensor:
        params = {n: T.reshape(vec[int(offsets[i]):int(offsets[i + 1])], shapes[i]) for i, n in enumerate(names)}
        fo = forward(Tensor(image), params, buffers, cfg, training=True, update_stats=False)
        return soft_margin_loss(combine_logits(fo.z_conv, fo.z_trans, w_conv, w_trans), label)

    with Graph() as graph:
        point = Tensor(flat.copy(), requires_grad=True)
        loss = loss_of(point)
    graph.backward(loss)
    g_ad = point.grad
    floor = np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / step / GRAD_TOLERANCE

    worst = 0.0
    for i, size in enumerate(sizes):
        order = rng.permutation(size)
        pos = 0
        for _ in range(min(coords_per_param, size)):
            for _draw in range(max_draws):
                c = int(offsets[i] + order[pos % size])
                pos += 1
                g_fd = T.central_difference(loss_of, flat, c, step)
                if abs(g_ad[c]) + abs(g_fd) >= floor or pos >= size:
                    break
            worst = max(worst, T.relative_error(g_ad[c], g_fd))
    return worst
