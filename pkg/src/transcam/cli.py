"""Command line entry point: ``transcam <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Run settings resolve as command-line flag > ``--config`` JSON file > built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .checkpoint import load_model, save_model
from .exceptions import ConfigError, TransCAMError
from .heatmap import export_heatmaps, render_stages
from .train import (GRAD_TOLERANCE, RunConfig, ablation_csv, ablation_runner, cam_maps, labels_from_maps,
                    metrics_csv, model_gradient_check, tau_sweep, train)

log = logging.getLogger("transcam")

# flag destination -> RunConfig field, for options that override the run config
RUN_FLAGS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "weight_decay": "weight_decay",
    "w_conv": "w_conv", "w_trans": "w_trans", "tau": "tau", "scales": "scales",
    "attn_range": "attn_range", "coupling": "coupling", "seed": "seed",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pixel(text: str) -> tuple[int, int]:
    try:
        y, x = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected Y,X, got {text!r}") from None
    return y, x


def resolve_run_config(config_path: str | None, overrides: dict, base: dict | None = None) -> RunConfig:
    """Merge built-in defaults, ``base`` (e.g. a checkpoint's config), a JSON file and flag overrides."""
    merged = RunConfig().to_dict()
    if base:
        merged.update(base)
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        model = {**merged["model"], **data.pop("model", {})}
        merged.update(data)
        merged["model"] = model
    merged.update({RUN_FLAGS[k]: v for k, v in overrides.items() if k in RUN_FLAGS and v is not None})
    return RunConfig.from_dict(merged)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--w-conv", type=float)
    p.add_argument("--w-trans", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--scales", type=_floats)
    p.add_argument("--attn-range", choices=["AS", "AD", "AA"])
    p.add_argument("--coupling", choices=["cam", "clsattn", "attnagg", "transcam"])
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transcam", description="Attention-refined class activation maps on a small dual-branch network.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render a synthetic shapes split")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", default="disk,rectangle,triangle")
    p.add_argument("--class-probs", type=_floats)
    p.add_argument("--max-shapes", type=int, default=3)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("--data", required=True, help="training split directory")
    p.add_argument("--eval-data", help="split with masks for per-epoch mIoU")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics CSV path")
    _add_run_flags(p)

    p = sub.add_parser("infer", help="pseudo labels and heatmaps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--labels", type=_floats, help="image-level labels used to gate classes, e.g. 1,0,1")
    _add_run_flags(p)
    p.add_argument("--mode", dest="coupling", choices=["cam", "clsattn", "attnagg", "transcam"])

    p = sub.add_parser("ablate", help="coupling, block-range and branch-weight ablations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation split with masks")
    p.add_argument("--train-data", help="training split for weight rows that retrain")
    p.add_argument("--modes", default="coupling,range,weights")
    p.add_argument("--retrain-epochs", type=int)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    _add_run_flags(p)

    p = sub.add_parser("sweep-tau", help="best background threshold on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", type=_floats)
    p.add_argument("--out", help="JSON path (stdout when omitted)")
    _add_run_flags(p)

    p = sub.add_parser("export-heatmaps", help="color-mapped CAM stages and attention rows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", default="cam,clsattn,attnagg,transcam")
    p.add_argument("--attn-range", choices=["AS", "AD", "AA"], help="default: the checkpoint's run config")
    p.add_argument("--ref-pixel", type=_pixel, help="Y,X reference pixel for attention rows")
    p.add_argument("--alpha", type=float, default=0.5)

    p = sub.add_parser("grad-check", help="finite-difference check of the training loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=2, help="coordinates per parameter tensor")
    return parser


def _threads_env() -> None:
    raw = os.environ.get("TCAM_THREADS")
    if raw is None:
        return
    try:
        ok = int(raw) >= 1
    except ValueError:
        ok = False
    if not ok:
        raise UsageError(f"TCAM_THREADS must be a positive integer, got {raw!r}")


def _read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise TransCAMError(f"cannot read image {path}: {exc}") from exc


def _class_names(bundle, k: int) -> list[str]:
    names = bundle.config.get("classes")
    return list(names) if names and len(names) == k else [f"class{c + 1}" for c in range(k)]


def _checkpoint_run(bundle) -> dict:
    run = dict(bundle.config.get("run", {}))
    run["model"] = bundle.config["model"]
    return run


def _overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in RUN_FLAGS}


def cmd_gen_data(args) -> int:
    from .data import GeneratorSpec, generate_dataset

    spec = GeneratorSpec(n=args.n, classes=tuple(c.strip() for c in args.classes.split(",") if c.strip()),
                         size=args.size, seed=args.seed, split=args.split,
                         class_probs=args.class_probs, max_shapes=args.max_shapes)
    manifest = generate_dataset(spec, args.out)
    print(f"wrote {len(manifest.stems)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import DatasetManifest

    cfg = resolve_run_config(args.config, _overrides(args))
    train_m = DatasetManifest.load(args.data)
    eval_m = DatasetManifest.load(args.eval_data) if args.eval_data else None
    if len(train_m.classes) != cfg.model.num_fg_classes:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "model": {**cfg.model.to_dict(), "num_fg_classes": len(train_m.classes)}})
    result = train(cfg, train_m, eval_m)
    save_model(result.model, args.out, {"run": cfg.to_dict(), "classes": list(train_m.classes)})
    if args.metrics:
        Path(args.metrics).write_text(metrics_csv(result.metrics, train_m.classes))
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.loss:.4f} acc {last.acc:.4f} miou {last.miou:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_infer(args) -> int:
    model, bundle = load_model(args.checkpoint)
    cfg = resolve_run_config(args.config, _overrides(args), _checkpoint_run(bundle))
    image = _read_image(args.image)
    k = model.config.num_fg_classes
    if args.labels is not None:
        if len(args.labels) != k:
            raise UsageError(f"--labels needs {k} entries, got {len(args.labels)}")
        gate = np.asarray(args.labels, dtype=np.int64)[None]
    else:
        from .train import predict_logits
        gate = (predict_logits(model, image[None], cfg.w_conv, cfg.w_trans) > 0).astype(np.int64)
    variant = (cfg.coupling, cfg.attn_range)
    maps = cam_maps(model, image[None], cfg.scales, [variant], labels=gate)[variant]
    labels = labels_from_maps(maps, cfg.tau)[0].astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels).save(out / "labels.png")
    render_stages(image, {cfg.coupling: maps[0]}, out, _class_names(bundle, k))
    print(f"wrote labels.png and {k} heatmaps to {out}")
    return 0


def cmd_ablate(args) -> int:
    from .data import DatasetManifest

    model, bundle = load_model(args.checkpoint)
    cfg = resolve_run_config(args.config, _overrides(args), _checkpoint_run(bundle))
    modes = [m for m in args.modes.split(",") if m.strip()]
    train_m = DatasetManifest.load(args.train_data) if args.train_data else None
    rows = ablation_runner(model, cfg, DatasetManifest.load(args.data), modes, train_m, args.retrain_epochs)
    text = ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep_tau(args) -> int:
    from .data import DatasetManifest

    model, bundle = load_model(args.checkpoint)
    cfg = resolve_run_config(args.config, _overrides(args), _checkpoint_run(bundle))
    res = tau_sweep(model, cfg, DatasetManifest.load(args.data), args.grid)
    text = json.dumps(res, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_heatmaps(args) -> int:
    model, bundle = load_model(args.checkpoint)
    image = _read_image(args.image)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    attn_range = args.attn_range or RunConfig.from_dict(_checkpoint_run(bundle)).attn_range
    paths = export_heatmaps(model, image, args.out, _class_names(bundle, model.config.num_fg_classes),
                            stages, attn_range, args.ref_pixel, alpha=args.alpha)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    err = model_gradient_check(seed=args.seed, coords_per_param=args.coords)
    ok = err < GRAD_TOLERANCE
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRAD_TOLERANCE:.0e})")
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "ablate": cmd_ablate,
    "sweep-tau": cmd_sweep_tau, "export-heatmaps": cmd_export_heatmaps, "grad-check": cmd_grad_check,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _threads_env()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TransCAMError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
