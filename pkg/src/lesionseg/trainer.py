"""Training loop: Adam, plateau LR decay, early stopping on validation mAP.

Checkpoints are written atomically (tmp file + os.replace) with a JSON
sidecar describing the epoch, metrics and configs, so a crash mid-write
never leaves a truncated file under the final name.  Per-epoch progress
goes to a JSON-lines log.
"""

import json
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .augment import Pipeline
from .dataset import DatasetIndex, load_sample
from .losses import LossConfig, combined_loss
from .metrics import AP_MODES, MetricsReport, evaluate


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    val_batch_size: int = 4
    max_epochs: int = 150
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    min_lr: float = 1e-6
    early_stop_patience: int = 15
    early_stop_min_delta: float = 0.0
    grad_clip: float = 5.0
    seed: int = 0
    device: str = "cpu"
    num_workers: int = 0
    binarization_tau: float = 0.5
    ap_mode: str = "component"

    def validate(self):
        if self.lr <= 0 or self.min_lr <= 0 or self.min_lr > self.lr:
            raise ValueError("need 0 < min_lr <= lr")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must be in (0, 1)")
        if self.batch_size < 1 or self.val_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 0 or self.early_stop_patience < 1:
            raise ValueError("patience values out of range")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if not 0 < self.binarization_tau < 1:
            raise ValueError("binarization_tau must be in (0, 1)")
        if self.ap_mode not in AP_MODES:
            raise ValueError(f"ap_mode must be one of {AP_MODES}")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data).validate()


class SegmentationDataset(Dataset):
    """Index-backed dataset yielding normalized images and binary masks.

    Training draws augmentation randomness from a stream keyed by (epoch,
    sample position), so a given epoch is reproducible no matter how the
    loader shuffles or how many workers it uses.
    """

    def __init__(self, index: DatasetIndex, split: str, pipeline: Pipeline,
                 augment: bool):
        self.entries = index.split_entries(split)
        if not self.entries:
            raise ValueError(f"split {split!r} has no samples")
        self.split = split
        self.pipeline = pipeline
        self.augment = augment
        self._epoch = 0

    def set_epoch(self, epoch: int):
        self._epoch = epoch

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i: int):
        sample = load_sample(self.entries[i])
        if self.augment:
            rng = self.pipeline.rng_for(self._epoch, i)
            out = self.pipeline.apply_train(sample, rng=rng)
        else:
            out = self.pipeline.apply_eval(sample)
        return {
            "image": torch.from_numpy(out.image),
            "masks": torch.from_numpy(out.masks.astype(np.float32)),
            "sample_id": out.sample_id,
        }


def make_loader(dataset, batch_size, shuffle, seed=0, num_workers=0):
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        generator=generator if shuffle else None,
    )


def _atomic_torch_save(payload, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def _atomic_json_save(payload, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2))
    os.replace(tmp, path)


def save_checkpoint(path, model, optimizer=None, scheduler=None, epoch=0,
                    best_map=0.0, run_config=None, metrics=None):
    """Atomic model/optimizer/scheduler snapshot plus a JSON sidecar.

    run_config is the full run configuration as a plain dict; it rides in
    the checkpoint so evaluation can rebuild the exact model later.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    run_config = dict(run_config) if run_config else None
    payload = {
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "scheduler_state": scheduler.state_dict() if scheduler else None,
        "epoch": epoch,
        "best_map": best_map,
        "run_config": run_config,
    }
    _atomic_torch_save(payload, path)
    sidecar = {
        "checkpoint": path.name,
        "epoch": epoch,
        "best_map": best_map,
        "metrics": metrics,
        "run_config": run_config,
    }
    _atomic_json_save(sidecar, path.with_suffix(".json"))
    return path


def load_checkpoint(path, model=None, optimizer=None, scheduler=None,
                    map_location="cpu", expect_model_config=None):
    path = Path(path)
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"failed to load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "model_state" not in payload:
        raise CheckpointError(f"checkpoint {path} has no model_state")
    if expect_model_config is not None:
        stored = (payload.get("run_config") or {}).get("model") or {}
        for key, want in dict(expect_model_config).items():
            got = stored.get(key)
            if isinstance(got, list):
                got = tuple(got)
            if isinstance(want, list):
                want = tuple(want)
            if got != want:
                raise CheckpointError(
                    f"checkpoint {path} was trained with {key}={got!r}, "
                    f"run requests {key}={want!r}"
                )
    if model is not None:
        model.load_state_dict(payload["model_state"])
    if optimizer is not None and payload.get("optimizer_state"):
        optimizer.load_state_dict(payload["optimizer_state"])
    if scheduler is not None and payload.get("scheduler_state"):
        scheduler.load_state_dict(payload["scheduler_state"])
    return payload


def validate(model, loader, loss_config: LossConfig, device="cpu", tau=0.5,
             ap_mode="component"):
    """Mean validation loss terms plus the metrics report.

    Restores the model's train/eval mode; never touches its parameters.
    """
    was_training = model.training
    model.eval()
    sums = {"total": 0.0, "dice": 0.0, "bce": 0.0, "focal": 0.0, "boundary": 0.0}
    batches = 0
    probs_list, gt_list = [], []
    with torch.no_grad():
        for batch in loader:
            images = batch["image"].to(device)
            masks = batch["masks"].to(device)
            logits = model.forward_logits(images)
            breakdown = combined_loss(logits, masks, loss_config)
            for key, value in breakdown.to_floats().items():
                sums[key] += value
            batches += 1
            probs = torch.sigmoid(logits).cpu().numpy().astype(np.float16)
            for b in range(probs.shape[0]):
                probs_list.append(probs[b])
                gt_list.append(batch["masks"][b].numpy() > 0.5)
    if was_training:
        model.train()
    losses = {k: v / max(batches, 1) for k, v in sums.items()}
    report = evaluate(probs_list, gt_list, tau=tau, ap_mode=ap_mode)
    return losses, report


@dataclass
class TrainingResult:
    epochs_run: int
    best_epoch: int
    best_map: float
    stopped_early: bool
    best_checkpoint: str
    last_checkpoint: str
    log_path: str
    history: list = field(default_factory=list)


def train(model, train_dataset, val_dataset, loss_config: LossConfig,
          config: TrainConfig, out_dir, run_config=None,
          progress=print) -> TrainingResult:
    config.validate()
    loss_config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"

    device = torch.device(config.device)
    torch.manual_seed(config.seed)
    model = model.to(device)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2)
    )
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer,
        mode="min",
        factor=config.scheduler_factor,
        patience=config.scheduler_patience,
        min_lr=config.min_lr,
    )
    train_loader = make_loader(
        train_dataset, config.batch_size, shuffle=True,
        seed=config.seed, num_workers=config.num_workers,
    )
    val_loader = make_loader(
        val_dataset, config.val_batch_size, shuffle=False,
        num_workers=config.num_workers,
    )

    best_map = -1.0
    best_epoch = 0
    bad_epochs = 0
    stopped_early = False
    history = []

    with open(log_path, "a") as log:
        for epoch in range(1, config.max_epochs + 1):
            train_dataset.set_epoch(epoch)
            model.train()
            epoch_sums = {"total": 0.0, "dice": 0.0, "bce": 0.0,
                          "focal": 0.0, "boundary": 0.0}
            steps = 0
            for step, batch in enumerate(train_loader):
                images = batch["image"].to(device)
                masks = batch["masks"].to(device)
                optimizer.zero_grad()
                logits = model.forward_logits(images)
                breakdown = combined_loss(logits, masks, loss_config)
                if not torch.isfinite(breakdown.total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"batch sample ids: {list(batch['sample_id'])}"
                    )
                breakdown.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                for key, value in breakdown.to_floats().items():
                    epoch_sums[key] += value
                steps += 1

            train_losses = {k: v / max(steps, 1) for k, v in epoch_sums.items()}
            val_losses, report = validate(
                model, val_loader, loss_config, device=device,
                tau=config.binarization_tau, ap_mode=config.ap_mode,
            )
            scheduler.step(val_losses["total"])

            improved = report.map > best_map + config.early_stop_min_delta
            if improved:
                best_map = report.map
                best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1

            record = {
                "epoch": epoch,
                "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "train_loss": train_losses,
                "val_loss": val_losses,
                "val_map": report.map,
                "val_miou": report.miou,
                "lr": optimizer.param_groups[0]["lr"],
                "improved": improved,
                "bad_epochs": bad_epochs,
            }
            history.append(record)
            log.write(json.dumps(record) + "\n")
            log.flush()
            if progress:
                progress(
                    f"epoch {epoch:3d}  train {train_losses['total']:.4f}  "
                    f"val {val_losses['total']:.4f}  mAP {report.map:.4f}  "
                    f"mIoU {report.miou:.4f}  lr {record['lr']:.2e}"
                )

            metrics_dict = report.as_dict()
            save_checkpoint(
                last_path, model, optimizer, scheduler, epoch=epoch,
                best_map=best_map, run_config=run_config, metrics=metrics_dict,
            )
            if improved:
                save_checkpoint(
                    best_path, model, optimizer, scheduler, epoch=epoch,
                    best_map=best_map, run_config=run_config, metrics=metrics_dict,
                )
            if bad_epochs >= config.early_stop_patience:
                stopped_early = True
                log.write(json.dumps({
                    "event": "early_stop", "epoch": epoch,
                    "best_epoch": best_epoch, "best_map": best_map,
                }) + "\n")
                break

    return TrainingResult(
        epochs_run=len(history),
        best_epoch=best_epoch,
        best_map=best_map,
        stopped_early=stopped_early,
        best_checkpoint=str(best_path),
        last_checkpoint=str(last_path),
        log_path=str(log_path),
        history=history,
    )
