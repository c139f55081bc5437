"""Command-line entry points.

Subcommands:
    prepare    index a dataset tree, standardize masks, write index + summary
    train      fit a model from a YAML run config
    evaluate   score a checkpoint on a split, print/write the metrics report
    predict    write per-class probability (16-bit) and mask PNGs
    overlay    blend lesion masks onto images with the class colors
    report     side-by-side table from several run metrics files

Every command exits 0 only when it completed without errors.  The compute
device comes from --device, then the LESIONSEG_DEVICE environment variable,
then the run config.  Checkpoints carry their run config, so evaluate and
predict need --config only to override it.
"""

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from .augment import build_pipeline
from .config import RunConfig, load_run_config, save_run_config
from .dataset import (
    IMAGE_EXTENSIONS,
    NUM_CLASSES,
    DatasetError,
    FundusSample,
    LesionClass,
    _index_mask_dir,
    load_image,
    scan_dataset,
    standardize_mask,
)
from .metrics import MetricsReport, evaluate
from .models import build_model, count_parameters
from .trainer import (
    CheckpointError,
    SegmentationDataset,
    TrainingError,
    load_checkpoint,
    make_loader,
    train,
    validate,
)

PROB_PNG_MAX = 65535  # probabilities are stored as 16-bit PNGs
DEVICE_ENV_VAR = "LESIONSEG_DEVICE"
GUARDED_MODEL_KEYS = ("arch", "num_classes", "encoder", "base_width", "cbam_reduction")


@dataclasses.dataclass
class OverlaySpec:
    """How masks are painted: blend weight and class draw order."""
    alpha: float = 0.5
    order: tuple = tuple(LesionClass.in_channel_order())  # MA, EX, SE, HE


def render_overlay(image, masks, spec=None):
    """Blend per-class masks onto an RGB image; later classes paint on top."""
    spec = spec or OverlaySpec()
    if not 0.0 < spec.alpha <= 1.0:
        raise ValueError(f"overlay alpha must be in (0, 1], got {spec.alpha}")
    out = image.astype(np.float32)
    for cls in spec.order:
        mask = masks[cls.channel_index] > 0
        if not mask.any():
            continue
        color = np.asarray(cls.overlay_color, dtype=np.float32)
        out[mask] = (1.0 - spec.alpha) * out[mask] + spec.alpha * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resolve_device(flag=None, config_device="cpu"):
    return flag or os.environ.get(DEVICE_ENV_VAR) or config_device


def _write_png(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), array):
        raise OSError(f"failed to write {path}")


def _list_images(path):
    """A single image file, or every image directly inside a directory."""
    path = Path(path)
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(
            p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not found:
            raise DatasetError(f"no images found in {path}")
        return found
    raise DatasetError(f"no such image or directory: {path}")


def _guard_model_config(checkpoint, stored: dict, requested) -> None:
    for key in GUARDED_MODEL_KEYS:
        got = stored.get(key)
        want = getattr(requested, key)
        if got != want:
            raise CheckpointError(
                f"checkpoint {checkpoint} was trained with {key}={got!r}, "
                f"run requests {key}={want!r}"
            )


def _model_from_checkpoint(args):
    """Rebuild the checkpointed model; --config overrides the stored config."""
    payload = load_checkpoint(args.checkpoint)
    stored = payload.get("run_config")
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
        if stored and stored.get("model"):
            _guard_model_config(args.checkpoint, stored["model"], cfg.model)
    elif stored:
        cfg = RunConfig.from_dict(stored)
    else:
        raise CheckpointError(
            f"checkpoint {args.checkpoint} carries no run config; pass --config"
        )
    device = resolve_device(args.device, cfg.train.device)
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model)
    model.load_state_dict(payload["model_state"])
    return cfg, model.to(device).eval(), device


def _split_dataset(cfg, data_root, split):
    if not data_root:
        raise DatasetError("no dataset root: pass --data-root or set data.root")
    index = scan_dataset(data_root)
    if not index.entries:
        raise DatasetError(f"no samples found under {data_root}")
    pipeline = build_pipeline(cfg.augment, cfg.train.seed)
    return SegmentationDataset(index, split, pipeline, augment=False)


def _iter_predictions(model, dataset, batch_size, device):
    loader = make_loader(dataset, batch_size, shuffle=False)
    with torch.no_grad():
        for batch in loader:
            probs = model(batch["image"].to(device)).cpu().numpy()
            for b in range(probs.shape[0]):
                yield (
                    batch["sample_id"][b],
                    probs[b],
                    batch["masks"][b].numpy() > 0.5,
                )


# ---------------------------------------------------------------------------
# subcommands

def cmd_prepare(args):
    index = scan_dataset(args.root)
    if not index.entries:
        raise DatasetError(f"no samples found under {args.root}")
    out = Path(args.out)
    std_root = out / "standardized"
    presence = {c: 0 for c in LesionClass}

    for entry in index.entries:
        image_out = std_root / entry.split / "image" / entry.image_path.name
        image_out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(entry.image_path, image_out)
        for cls in LesionClass:
            mask_path = entry.mask_paths.get(cls)
            if mask_path is None:
                continue
            mask = standardize_mask(mask_path, threshold=args.threshold)
            if mask.any():
                presence[cls] += 1
            _write_png(
                std_root / entry.split / "label" / cls.name / f"{entry.sample_id}.png",
                mask * 255,
            )

    new_index = scan_dataset(std_root)
    new_index.save(out / "index.json")
    summary = {
        "source_root": str(Path(args.root)),
        "standardized_root": str(std_root),
        "split_counts": new_index.split_counts(),
        "images_with_lesion": {
            c.name: presence[c] for c in LesionClass.in_channel_order()
        },
        "total_images": len(new_index),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))

    print(f"indexed {len(new_index)} image(s) from {args.root}")
    for split, count in summary["split_counts"].items():
        print(f"  {split}: {count}")
    print("images with at least one lesion pixel:")
    for name, count in summary["images_with_lesion"].items():
        print(f"  {name}: {count}")
    print(f"standardized tree: {std_root}")
    print(f"index: {out / 'index.json'}")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.max_epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, max_epochs=args.max_epochs)
    cfg.train = dataclasses.replace(
        cfg.train, device=resolve_device(args.device, cfg.train.device)
    )
    if args.data_root:
        cfg.data = dataclasses.replace(cfg.data, root=str(args.data_root))
    cfg.validate()

    if not cfg.data.root:
        raise DatasetError("no dataset root: pass --data-root or set data.root")
    index = scan_dataset(cfg.data.root)
    if not index.entries:
        raise DatasetError(f"no samples found under {cfg.data.root}")

    pipeline = build_pipeline(cfg.augment, cfg.train.seed)
    train_ds = SegmentationDataset(index, cfg.data.train_split, pipeline, augment=True)
    val_ds = SegmentationDataset(index, cfg.data.val_split, pipeline, augment=False)

    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, out_dir / "config.yaml")
    print(
        f"{cfg.model.arch}: {count_parameters(model):,} trainable parameters; "
        f"train {len(train_ds)} / val {len(val_ds)} samples; "
        f"device {cfg.train.device}"
    )

    result = train(
        model, train_ds, val_ds, cfg.loss, cfg.train, out_dir,
        run_config=cfg.to_dict(),
    )

    # final report: best checkpoint scored on the validation split
    load_checkpoint(result.best_checkpoint, model=model)
    val_loader = make_loader(val_ds, cfg.train.val_batch_size, shuffle=False)
    _, report = validate(
        model, val_loader, cfg.loss, device=cfg.train.device,
        tau=cfg.train.binarization_tau, ap_mode=cfg.train.ap_mode,
    )
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.txt").write_text(report.to_table(cfg.name) + "\n")

    print(
        f"done: {result.epochs_run} epoch(s), best mAP {result.best_map:.4f} "
        f"at epoch {result.best_epoch}"
        + (" (early stop)" if result.stopped_early else "")
    )
    print(f"best checkpoint: {result.best_checkpoint}")
    print(f"log: {result.log_path}")
    print(f"report: {out_dir / 'metrics.json'}")
    return 0


def cmd_evaluate(args):
    cfg, model, device = _model_from_checkpoint(args)
    dataset = _split_dataset(cfg, args.data_root or cfg.data.root, args.split)
    probs_list, gt_list = [], []
    for _, probs, gt in _iter_predictions(
        model, dataset, cfg.train.val_batch_size, device
    ):
        probs_list.append(probs.astype(np.float16))
        gt_list.append(gt)

    taus = args.tau or [cfg.train.binarization_tau]
    ap_mode = args.ap_mode or cfg.train.ap_mode
    for tau in taus:
        report = evaluate(probs_list, gt_list, tau=tau, ap_mode=ap_mode)
        label = cfg.name if len(taus) == 1 else f"{cfg.name} (tau={tau:g})"
        print(report.to_table(model_name=label))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            name = "metrics.json" if len(taus) == 1 else f"metrics_tau{tau:g}.json"
            (out / name).write_text(report.to_json())
            print(f"metrics: {out / name}")
        if tau != taus[-1]:
            print()
    return 0


def cmd_predict(args):
    cfg, model, device = _model_from_checkpoint(args)
    tau = args.tau if args.tau is not None else cfg.train.binarization_tau
    pipeline = build_pipeline(cfg.augment, cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_samples = 0
    n_files = 0
    n_errors = 0
    for path in _list_images(args.input):
        try:
            image = load_image(path)
        except DatasetError as exc:
            print(f"error: {exc}", file=sys.stderr)
            n_errors += 1
            continue
        h, w = image.shape[:2]
        sample = FundusSample(
            image=image,
            masks=np.zeros((NUM_CLASSES, h, w), dtype=np.uint8),
            sample_id=path.stem,
            split="predict",
        )
        tensor = torch.from_numpy(pipeline.apply_eval(sample).image)[None]
        with torch.no_grad():
            probs = model(tensor.to(device))[0].cpu().numpy()
        for cls in LesionClass.in_channel_order():
            channel = probs[cls.channel_index]
            prob_png = np.rint(
                np.clip(channel, 0.0, 1.0) * PROB_PNG_MAX
            ).astype(np.uint16)
            mask_png = ((channel > tau) * 255).astype(np.uint8)
            _write_png(out / f"{sample.sample_id}_{cls.name}_prob.png", prob_png)
            _write_png(out / f"{sample.sample_id}_{cls.name}_mask.png", mask_png)
            n_files += 2
        n_samples += 1
    print(f"wrote {n_files} file(s) for {n_samples} image(s) to {out}")
    if n_errors:
        print(f"{n_errors} image(s) failed", file=sys.stderr)
        return 1
    return 0


def _gt_masks_for(image_path, shape):
    """Ground-truth mask stack from the sibling label/ directory; absent
    class files load as zeros."""
    label_root = image_path.parent.parent / "label"
    masks = np.zeros((NUM_CLASSES, *shape), dtype=np.uint8)
    for cls in LesionClass:
        found = _index_mask_dir(label_root / cls.name)
        mask_path = found.get(image_path.stem)
        if mask_path is None:
            continue
        mask = standardize_mask(mask_path)
        if mask.shape != shape:
            raise DatasetError(
                f"mask/image size mismatch: {mask_path} is {mask.shape}, "
                f"{image_path} is {shape}"
            )
        masks[cls.channel_index] = mask
    return masks


def cmd_overlay(args):
    spec = OverlaySpec(alpha=args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    use_gt = args.source == "gt"
    n = 0
    for path in _list_images(args.image):
        image = load_image(path)
        if use_gt:
            masks = _gt_masks_for(path, image.shape[:2])
        else:
            masks_dir = Path(args.source)
            channels = []
            for cls in LesionClass.in_channel_order():
                mask_path = masks_dir / f"{path.stem}_{cls.name}_mask.png"
                if not mask_path.is_file():
                    raise DatasetError(f"missing predicted mask: {mask_path}")
                channels.append(standardize_mask(mask_path))
            if len({m.shape for m in channels}) != 1:
                raise DatasetError(
                    f"predicted masks for {path.stem} disagree in size"
                )
            masks = np.stack(channels)
            if masks.shape[1:] != image.shape[:2]:
                image = cv2.resize(
                    image, (masks.shape[2], masks.shape[1]),
                    interpolation=cv2.INTER_LINEAR,
                )
        blended = render_overlay(image, masks, spec)
        _write_png(out / f"{path.stem}_overlay.png",
                   cv2.cvtColor(blended, cv2.COLOR_RGB2BGR))
        n += 1
    print(f"wrote {n} overlay(s) to {out}")
    return 0


def cmd_report(args):
    paths = []
    for run in args.runs:
        p = Path(run)
        if p.is_dir():
            p = p / "metrics.json"
        if not p.is_file():
            raise DatasetError(f"no metrics file at {p}")
        paths.append(p)
    if args.names and len(args.names) != len(paths):
        raise ValueError("--names must match the number of runs")
    names = args.names or [p.parent.name or f"run{i}" for i, p in enumerate(paths)]
    reports = [
        MetricsReport.from_dict(json.loads(p.read_text())) for p in paths
    ]

    if args.format == "json":
        combined = json.dumps(
            {name: r.as_dict() for name, r in zip(names, reports)}, indent=2
        )
        print(combined)
        if args.out:
            Path(args.out).write_text(combined + "\n")
        return 0

    labels = (
        [f"AP ({c.name})" for c in LesionClass.in_channel_order()]
        + ["mAP"]
        + [f"IoU ({c.name})" for c in LesionClass.in_channel_order()]
        + ["mIoU"]
    )

    def values(report):
        row = {}
        for c in LesionClass.in_channel_order():
            row[f"AP ({c.name})"] = report.per_class[c]["ap"]
            row[f"IoU ({c.name})"] = report.per_class[c]["iou"]
        row["mAP"] = report.map
        row["mIoU"] = report.miou
        return row

    rows = [values(r) for r in reports]
    label_w = max(len(s) for s in labels + ["Metric"])
    col_ws = [max(len(n), 6) for n in names]
    lines = ["  ".join([f"{'Metric':<{label_w}}"]
                       + [f"{n:>{w}}" for n, w in zip(names, col_ws)])]
    for label in labels:
        cells = [f"{row[label]:>{w}.4f}" for row, w in zip(rows, col_ws)]
        lines.append("  ".join([f"{label:<{label_w}}"] + cells))
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="lesionseg",
        description="Train and evaluate retinal lesion segmentation models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="index a dataset and standardize masks")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int, default=127,
                   help="mask foreground threshold on 8-bit intensity")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--device", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None,
                   help="override the checkpoint's embedded run config")
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--device", default=None)
    p.add_argument("--tau", type=float, nargs="+", default=None,
                   help="one or more binarization thresholds")
    p.add_argument("--ap-mode", choices=("component", "image"), default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write probability and mask PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None,
                   help="override the checkpoint's embedded run config")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--device", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay", help="blend lesion masks onto images")
    p.add_argument("--image", required=True, help="image file or directory")
    p.add_argument("--source", required=True,
                   help="'gt' for sibling label/ masks, or a directory of "
                        "<id>_<CLASS>_mask.png predictions")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("report", help="tabulate metrics from several runs")
    p.add_argument("--runs", nargs="+", required=True,
                   help="metrics.json files or run directories containing one")
    p.add_argument("--names", nargs="*", default=None)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, TrainingError, ValueError,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
