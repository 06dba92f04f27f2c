"""Command-line entry point.

Subcommands::

    synth     generate a synthetic ellipse corpus
    train     train a model per the config file
    ablate    train the paired consistency arms and emit the comparison
    eval      evaluate a checkpoint and emit metric reports
    predict   write probability maps, binary masks, and overlays
    params    print the trainable-parameter breakdown

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure. Runs are deterministic given (config, seed); the resolved config
is echoed into the output directory.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import __version__, kernels
from .config import config_to_dict, echo_config, load_run_config
from .data import (
    CHANNEL_MEAN,
    CHANNEL_STD,
    SplitSpec,
    generate_synthetic,
    load_corpus,
    preprocess,
    split_corpus,
)
from .decoders import AUX_PARAM_BUDGET, PUBLISHED_PARAM_COUNT, PlutoNet, count_parameters
from .errors import CheckpointError, ConfigError, DataError, NumericError, PlutoNetError, ShapeError
from .metrics import evaluate
from .trainer import load_checkpoint, run_ablation, train

log = logging.getLogger("plutonet")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="plutonet", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"plutonet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True, help="number of image/mask pairs")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--image-size", type=int, default=224, help="square image size (default 224)")

    for name, help_text in (
        ("train", "train per the config file"),
        ("ablate", "run the paired consistency ablation"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("overrides", nargs="*", metavar="section.key=value",
                       help="dotted-path config overrides")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory (with model.npz)")
    p.add_argument("--data", default=None, help="corpus root (default: from the checkpoint manifest)")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--threshold", type=float, default=None, help="binarization threshold")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out", default=None, help="report directory (default: <checkpoint>/eval_<split>)")

    p = sub.add_parser("predict", help="write masks and overlays for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of images, or a corpus root")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("params", help="print the parameter breakdown")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="YAML run config")
    group.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("overrides", nargs="*", metavar="section.key=value")

    return parser


def _load_config(args, extra):
    tokens = list(getattr(args, "overrides", ())) + list(extra)
    return load_run_config(args.config, tokens)


def _resolved_train_cfg(cfg, checkpoint_dir):
    return replace(cfg.train, loss=cfg.loss, checkpoint_dir=str(checkpoint_dir))


def cmd_synth(args, extra):
    if extra:
        raise ConfigError(f"unrecognized arguments: {extra}")
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    out = generate_synthetic(args.n, args.seed, args.out, image_size=args.image_size)
    print(f"wrote {args.n} image/mask pairs and manifest.json to {out}")
    return 0


def cmd_train(args, extra):
    cfg = _load_config(args, extra)
    if cfg.data.root is None:
        raise ConfigError("data.root must point at a corpus directory")
    out = Path(cfg.output_dir)
    echo_config(cfg, out)
    _write_run_meta(out, "train")
    samples = load_corpus(cfg.data.root)
    train_split, val_split, _ = split_corpus(samples, cfg.data.split)
    model = PlutoNet(cfg.backbone, cfg.model, seed=cfg.train.seed)
    train_cfg = _resolved_train_cfg(cfg, out / "checkpoints")
    model, history = train(
        model,
        train_split,
        val_split,
        train_cfg,
        augment_cfg=cfg.data.augment,
        eval_threshold=cfg.eval.threshold,
        standardize=cfg.data.standardize,
        run_config_payload=config_to_dict(cfg),
    )
    best = history.epochs[history.best_epoch - 1]
    print(
        f"finished after {len(history.epochs)} epochs ({history.stop_reason}); "
        f"best epoch {history.best_epoch}: val loss {best.val_total:.4f}, "
        f"val dice {best.val_dice:.4f}"
    )
    print(f"checkpoints and history in {out / 'checkpoints'}")
    return 0


def cmd_ablate(args, extra):
    cfg = _load_config(args, extra)
    if cfg.data.root is None:
        raise ConfigError("data.root must point at a corpus directory")
    out = Path(cfg.output_dir)
    echo_config(cfg, out)
    _write_run_meta(out, "ablate")
    samples = load_corpus(cfg.data.root)
    train_cfg = replace(cfg.train, loss=cfg.loss)
    report, _ = run_ablation(
        samples,
        cfg.data.split,
        cfg.backbone,
        cfg.model,
        train_cfg,
        augment_cfg=cfg.data.augment,
        eval_threshold=cfg.eval.threshold,
        standardize=cfg.data.standardize,
        output_dir=out / "ablation",
        dataset_label=Path(cfg.data.root).name,
    )
    print(report.to_text())
    print(f"paired report in {out / 'ablation'}")
    return 0


def cmd_eval(args, extra):
    if extra:
        raise ConfigError(f"unrecognized arguments: {extra}")
    model, manifest = load_checkpoint(args.checkpoint)
    run_cfg = manifest.get("run_config") or {}
    data_root = args.data or (run_cfg.get("data") or {}).get("root")
    if not data_root:
        raise ConfigError("no --data given and the checkpoint manifest records no corpus root")
    split_payload = (run_cfg.get("data") or {}).get("split") or {}
    spec = SplitSpec(**split_payload)
    threshold = args.threshold
    if threshold is None:
        threshold = (run_cfg.get("eval") or {}).get("threshold", 0.5)
    batch_size = args.batch_size or (run_cfg.get("train") or {}).get("batch_size", 8)
    aggregation = (run_cfg.get("eval") or {}).get("aggregation", "both")

    standardize = bool((run_cfg.get("data") or {}).get("standardize", False))
    samples = load_corpus(data_root)
    splits = dict(zip(("train", "val", "test"), split_corpus(samples, spec)))
    chosen = samples if args.split == "all" else splits[args.split]
    if not chosen:
        raise DataError(f"split {args.split!r} is empty")
    pairs = [preprocess(s, standardize=standardize) for s in chosen]
    report = evaluate(
        model, pairs, threshold=threshold, aggregation=aggregation,
        batch_size=batch_size, label=f"{Path(data_root).name}/{args.split}",
    )
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text())
    print(f"reports in {out}")
    return 0


def _list_prediction_images(images_dir):
    root = Path(images_dir)
    if not root.is_dir():
        raise DataError(f"image directory not found: {root}")
    img_dir = root / "images" if (root / "images").is_dir() else root
    mask_dir = root / "masks" if (root / "masks").is_dir() else None
    exts = (".png", ".jpg", ".jpeg")
    files = [p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in exts]
    if not files:
        raise DataError(f"no images found under {img_dir}")
    return files, mask_dir


def _overlay(image_u8, pred_mask, gt_mask=None, alpha=0.45):
    out = image_u8.astype(np.float32)
    tint = np.zeros_like(out)
    tint[..., 0] = 255.0
    m = pred_mask[..., None].astype(np.float32)
    out = out * (1.0 - alpha * m) + tint * (alpha * m)
    if gt_mask is not None:
        boundary = gt_mask & ~ndimage.binary_erosion(gt_mask, iterations=1)
        out[boundary] = (0.0, 255.0, 0.0)
    return out.clip(0, 255).astype(np.uint8)


def _load_prediction_input(image_path, mask_path, standardize=False):
    """Preprocess one prediction input; ground truth is optional."""
    from .data import _read_image, preprocess_pair, standardize_image

    image = _read_image(image_path, "RGB").transpose(2, 0, 1)
    if mask_path is None:
        image, mask = preprocess_pair(image, np.zeros(image.shape[1:], dtype=np.float32))
        mask = None
    else:
        image, mask = preprocess_pair(image, _read_image(mask_path, "L"))
    if standardize:
        image = standardize_image(image)
    return image, mask


def cmd_predict(args, extra):
    if extra:
        raise ConfigError(f"unrecognized arguments: {extra}")
    model, manifest = load_checkpoint(args.checkpoint)
    run_cfg = manifest.get("run_config") or {}
    standardize = bool((run_cfg.get("data") or {}).get("standardize", False))
    files, mask_dir = _list_prediction_images(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in files:
        gt_path = None
        if mask_dir is not None:
            candidate = mask_dir / f"{path.stem}.png"
            gt_path = candidate if candidate.exists() else None
        image, gt = _load_prediction_input(path, gt_path, standardize)
        probs = model.predict(image[None])[0, 0]
        pred_mask = probs >= args.threshold
        Image.fromarray((probs * 65535.0).round().astype(np.uint16)).save(
            out / f"{path.stem}_prob.png"
        )
        Image.fromarray((pred_mask * np.uint8(255)), mode="L").save(out / f"{path.stem}_mask.png")
        display = image * CHANNEL_STD[:, None, None] + CHANNEL_MEAN[:, None, None] if standardize else image
        image_u8 = (display.clip(0, 1).transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        gt_bool = None if gt is None else gt[0] >= 0.5
        Image.fromarray(_overlay(image_u8, pred_mask, gt_bool), mode="RGB").save(
            out / f"{path.stem}_overlay.png"
        )
    print(f"wrote {len(files)} prediction triplets to {out}")
    return 0


def cmd_params(args, extra):
    if args.checkpoint:
        if extra:
            raise ConfigError(f"unrecognized arguments: {extra}")
        model, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = _load_config(args, extra)
        model = PlutoNet(cfg.backbone, cfg.model, seed=cfg.train.seed)
    counts = count_parameters(model)
    width = max(len(k) for k in counts)
    for key in ("backbone", "reducers", "partial_decoder", "head", "auxiliary", "total"):
        print(f"{key.ljust(width)}  {counts[key]:>12,}")
    print(
        f"\nauxiliary budget: {counts['auxiliary']:,} <= {AUX_PARAM_BUDGET} "
        f"({'ok' if counts['auxiliary'] <= AUX_PARAM_BUDGET else 'EXCEEDED'})"
    )
    print(
        f"published reference total (EfficientNetB0 encoder): {PUBLISHED_PARAM_COUNT:,} "
        f"- this build: {counts['total']:,} ({model.backbone_cfg.variant} backbone)"
    )
    return 0


def _write_run_meta(out_dir, command):
    meta = {
        "plutonet_version": __version__,
        "command": command,
        "kernel_backend": kernels.active_backend(),
        "argv": sys.argv[1:],
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "params": cmd_params,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        bad = [t for t in extra if "=" not in t]
        if bad:
            raise ConfigError(f"unrecognized arguments: {bad}")
        return _COMMANDS[args.command](args, extra)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, PlutoNetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
