"""Pixel-level segmentation of diabetic-retinopathy lesions (MA, EX, SE, HE)."""

from .augment import AugmentationConfig, Pipeline, apply_eval, build_pipeline
from .config import DataConfig, RunConfig, load_run_config, save_run_config
from .dataset import (
    NUM_CLASSES,
    DatasetError,
    DatasetIndex,
    FundusSample,
    IndexEntry,
    LesionClass,
    MaskFormatError,
    class_presence_stats,
    load_image,
    load_sample,
    scan_dataset,
    standardize_mask,
)
from .losses import LossBreakdown, LossConfig, combined_loss
from .metrics import MetricsReport, average_precision, binarize, evaluate, iou
from .models import ModelConfig, build_model, count_parameters
from .trainer import (
    CheckpointError,
    SegmentationDataset,
    TrainConfig,
    TrainingError,
    TrainingResult,
    load_checkpoint,
    save_checkpoint,
    train,
    validate,
)

__version__ = "0.1.0"
