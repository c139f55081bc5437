"""Discovery and loading of DDR-style lesion segmentation datasets.

Expected directory layout::

    <root>/<split>/image/<id>.{jpg,jpeg,png}
    <root>/<split>/label/<CLASS>/<id>.{png,tif,tiff}

where <split> is one of train/val/test ("valid" is accepted for val) and
<CLASS> is one of MA, EX, SE, HE.  A missing per-class mask file means the
lesion is absent from that image and is materialized as an all-zero mask.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
MASK_EXTENSIONS = (".png", ".tif", ".tiff")
SPLITS = ("train", "val", "test")

# Directory names tried for each canonical split (DDR ships "valid").
DEFAULT_SPLIT_LAYOUT = {
    "train": ("train",),
    "val": ("val", "valid"),
    "test": ("test",),
}

# Pixels strictly above this 8-bit intensity count as foreground.
MASK_BINARIZE_THRESHOLD = 127


class DatasetError(Exception):
    pass


class MaskFormatError(DatasetError):
    """Raised for unreadable or malformed mask rasters; carries the path."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)
        self.reason = reason


class LesionClass(Enum):
    """The four lesion types, with fixed mask channel and overlay color."""

    MA = (0, (255, 0, 0))      # microaneurysm, red
    EX = (1, (0, 255, 0))      # hard exudate, green
    SE = (2, (0, 255, 255))    # soft exudate, light blue
    HE = (3, (0, 0, 255))      # hemorrhage, blue

    def __init__(self, channel_index, overlay_color):
        self.channel_index = channel_index
        self.overlay_color = overlay_color

    @classmethod
    def in_channel_order(cls):
        return sorted(cls, key=lambda c: c.channel_index)


NUM_CLASSES = len(LesionClass)


@dataclass
class IndexEntry:
    sample_id: str
    split: str
    image_path: Path
    # one path per lesion class; None records an absent mask
    mask_paths: dict = field(default_factory=dict)

    def present_classes(self):
        return [c for c in LesionClass if self.mask_paths.get(c) is not None]


@dataclass
class DatasetIndex:
    root: Path
    entries: list

    def __len__(self):
        return len(self.entries)

    def split_entries(self, split):
        return [e for e in self.entries if e.split == split]

    def split_counts(self):
        return {s: len(self.split_entries(s)) for s in SPLITS}

    def to_json_dict(self):
        return {
            "root": str(self.root),
            "entries": [
                {
                    "sample_id": e.sample_id,
                    "split": e.split,
                    "image": str(e.image_path),
                    "masks": {
                        c.name: (str(p) if p is not None else None)
                        for c, p in sorted(
                            e.mask_paths.items(), key=lambda kv: kv[0].channel_index
                        )
                    },
                }
                for e in self.entries
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        entries = [
            IndexEntry(
                sample_id=d["sample_id"],
                split=d["split"],
                image_path=Path(d["image"]),
                mask_paths={
                    LesionClass[name]: (Path(p) if p is not None else None)
                    for name, p in d["masks"].items()
                },
            )
            for d in data["entries"]
        ]
        return cls(root=Path(data["root"]), entries=entries)


@dataclass
class FundusSample:
    """One fundus image with its stacked per-class binary masks.

    image: (H, W, 3) uint8, RGB.  masks: (4, H, W) uint8 in {0, 1}, channel c
    belonging to the LesionClass with channel_index c.
    """

    image: np.ndarray
    masks: np.ndarray
    sample_id: str
    split: str


def scan_dataset(root_path, split_layout=None):
    """Index every image under ``root_path``; deterministic (sorted by id).

    Missing per-class mask files are recorded as None, not errors.  Images
    with no mask in any class are indexed with a warning.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a readable directory: {root}")
    layout = split_layout or DEFAULT_SPLIT_LAYOUT

    entries = []
    for split in SPLITS:
        split_dir = None
        for name in layout[split]:
            if (root / name).is_dir():
                split_dir = root / name
                break
        if split_dir is None:
            continue
        image_dir = split_dir / "image"
        if not image_dir.is_dir():
            continue

        masks_by_class = {
            c: _index_mask_dir(split_dir / "label" / c.name) for c in LesionClass
        }
        n_all_absent = 0
        for image_path in sorted(image_dir.iterdir()):
            if image_path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            stem = image_path.stem
            mask_paths = {c: masks_by_class[c].get(stem) for c in LesionClass}
            if all(p is None for p in mask_paths.values()):
                n_all_absent += 1
            entries.append(
                IndexEntry(
                    sample_id=stem,
                    split=split,
                    image_path=image_path,
                    mask_paths=mask_paths,
                )
            )
        if n_all_absent:
            log.warning(
                "%s: %d image(s) have no mask file in any class; "
                "they will load with all-zero masks",
                split_dir,
                n_all_absent,
            )

    entries.sort(key=lambda e: (e.split, e.sample_id))
    return DatasetIndex(root=root, entries=entries)


def _index_mask_dir(class_dir):
    if not class_dir.is_dir():
        return {}
    found = {}
    for p in sorted(class_dir.iterdir()):
        if p.suffix.lower() in MASK_EXTENSIONS:
            # prefer PNG when both a PNG and a TIFF exist for the same stem
            if p.stem not in found or p.suffix.lower() == ".png":
                found[p.stem] = p
    return found


def standardize_mask(mask_path, threshold=MASK_BINARIZE_THRESHOLD):
    """Read a PNG/TIFF mask raster and binarize it to a (H, W) {0,1} array.

    Multi-channel rasters are reduced with a per-pixel channel maximum so any
    colored annotation counts as foreground; 16-bit inputs are scaled down to
    8 bits before thresholding.  Idempotent on the binary result.
    """
    path = Path(mask_path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MaskFormatError(path, "unreadable or unsupported raster")
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    elif raw.ndim != 2:
        raise MaskFormatError(path, f"unexpected raster shape {raw.shape}")
    if raw.dtype == np.uint16:
        raw = (raw // 257).astype(np.uint8)
    elif raw.dtype != np.uint8:
        raw = np.clip(raw, 0, 255).astype(np.uint8)
    return (raw > threshold).astype(np.uint8)


def load_image(image_path):
    """Decode an image file to (H, W, 3) uint8 RGB (sources decode as BGR)."""
    raw = cv2.imread(str(image_path), cv2.IMREAD_COLOR)
    if raw is None:
        raise DatasetError(f"unreadable image: {image_path}")
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)


def load_sample(entry):
    """Materialize an index entry: RGB image plus stacked (4, H, W) masks.

    Absent masks become zeros.  A mask whose size disagrees with the image is
    an error naming both files.
    """
    image = load_image(entry.image_path)
    h, w = image.shape[:2]
    masks = np.zeros((NUM_CLASSES, h, w), dtype=np.uint8)
    for cls in LesionClass:
        mask_path = entry.mask_paths.get(cls)
        if mask_path is None:
            continue
        mask = standardize_mask(mask_path)
        if mask.shape != (h, w):
            raise DatasetError(
                f"mask/image size mismatch: {mask_path} is {mask.shape}, "
                f"{entry.image_path} is {(h, w)}"
            )
        masks[cls.channel_index] = mask
    return FundusSample(
        image=image, masks=masks, sample_id=entry.sample_id, split=entry.split
    )


def class_presence_stats(index):
    """Count, per class, the images whose mask has >= 1 foreground pixel."""
    counts = {c: 0 for c in LesionClass}
    for entry in index.entries:
        for cls in LesionClass:
            mask_path = entry.mask_paths.get(cls)
            if mask_path is None:
                continue
            if standardize_mask(mask_path).any():
                counts[cls] += 1
    return counts
