"""IoU, precision and threshold-swept average precision over a split.

Per-class IoU is dataset-aggregated (summed intersections over summed
unions).  AP matches predicted to ground-truth lesion components one-to-one
(greedy, by descending IoU) and averages precision over the IoU thresholds
0.50, 0.55, ..., 0.95.  Two protocols are supported and always labeled in
the report: "component" matches 8-connected components, "image" treats each
image's whole per-class mask as a single prediction.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import LesionClass

AP_IOU_THRESHOLDS = tuple(0.50 + 0.05 * i for i in range(10))
AP_MODES = ("component", "image")

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def binarize(probs, tau=0.5):
    """Pixel = 1 iff probability strictly exceeds tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    return (np.asarray(probs) > tau).astype(np.uint8)


def iou(pred, gt, eps=1e-6):
    """(|P∩T| + eps) / (|P| + |T| - |P∩T| + eps) for binary masks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    inter = float(np.logical_and(pred, gt).sum())
    union = float(np.count_nonzero(pred)) + float(np.count_nonzero(gt)) - inter
    return (inter + eps) / (union + eps)


def precision(tp, fp):
    """tp / (tp + fp); 0 by convention when nothing was predicted."""
    if tp < 0 or fp < 0:
        raise ValueError("counts must be >= 0")
    return 0.0 if tp + fp == 0 else tp / (tp + fp)


def connected_components(mask):
    """8-connected foreground components as a list of boolean arrays."""
    labeled, count = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    return [labeled == i for i in range(1, count + 1)]


def match_components(pred_components, gt_components):
    """Greedy one-to-one matching by descending pairwise IoU.

    Both arguments are per-image component lists; returns the matched IoU
    values (unmatched predictions simply contribute no entry).
    """
    pairs = []
    for i, p in enumerate(pred_components):
        for j, g in enumerate(gt_components):
            inter = float(np.logical_and(p, g).sum())
            if inter == 0:
                continue
            union = float(p.sum()) + float(g.sum()) - inter
            pairs.append((inter / union, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_pred, used_gt = set(), set()
    matched = []
    for value, i, j in pairs:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
        matched.append(value)
    return matched


def average_precision(pred_components, gt_components, thresholds=AP_IOU_THRESHOLDS):
    """AP over an evaluation set.

    pred_components / gt_components: one component list per image, aligned.
    For each threshold t, precision_t = (#matched pairs with IoU >= t) /
    (#predicted components); AP is the mean over thresholds.
    """
    if len(pred_components) != len(gt_components):
        raise ValueError("prediction/ground-truth image counts differ")
    if len(pred_components) == 0:
        raise ValueError("empty evaluation set")
    n_pred = sum(len(comps) for comps in pred_components)
    matched = []
    for preds, gts in zip(pred_components, gt_components):
        matched.extend(match_components(preds, gts))
    matched = np.asarray(matched)
    precisions = [
        precision(int((matched >= t).sum()), n_pred - int((matched >= t).sum()))
        for t in thresholds
    ]
    return float(np.mean(precisions))


@dataclass
class MetricsReport:
    per_class: dict                 # LesionClass -> {"ap": float, "iou": float}
    map: float
    miou: float
    thresholds: tuple = AP_IOU_THRESHOLDS
    binarization_tau: float = 0.5
    ap_mode: str = "component"
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "per_class": {
                c.name: dict(v) for c, v in sorted(
                    self.per_class.items(), key=lambda kv: kv[0].channel_index
                )
            },
            "mAP": self.map,
            "mIoU": self.miou,
            "thresholds": list(self.thresholds),
            "binarization_tau": self.binarization_tau,
            "ap_mode": self.ap_mode,
            **self.extra,
        }

    def to_json(self, indent=2):
        return json.dumps(self.as_dict(), indent=indent)

    def to_table(self, model_name="model"):
        """Aligned text table with one row per metric (AP then IoU)."""
        rows = []
        for c in LesionClass.in_channel_order():
            rows.append((f"AP ({c.name})", self.per_class[c]["ap"]))
        rows.append(("mAP", self.map))
        for c in LesionClass.in_channel_order():
            rows.append((f"IoU ({c.name})", self.per_class[c]["iou"]))
        rows.append(("mIoU", self.miou))
        label_w = max(len(r[0]) for r in rows + [("Metric", 0)])
        lines = [f"{'Metric':<{label_w}}  {model_name}"]
        for label, value in rows:
            lines.append(f"{label:<{label_w}}  {value:.4f}")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, data):
        return cls(
            per_class={
                LesionClass[name]: dict(v) for name, v in data["per_class"].items()
            },
            map=data["mAP"],
            miou=data["mIoU"],
            thresholds=tuple(data.get("thresholds", AP_IOU_THRESHOLDS)),
            binarization_tau=data.get("binarization_tau", 0.5),
            ap_mode=data.get("ap_mode", "component"),
        )


def _image_mode_components(mask):
    """The whole nonempty mask as one pseudo-component."""
    mask = np.asarray(mask) > 0
    return [mask] if mask.any() else []


def evaluate(model_outputs, gt, tau=0.5, eps=1e-6, ap_mode="component",
             thresholds=AP_IOU_THRESHOLDS):
    """Per-class AP and IoU over aligned (4, H, W) outputs and ground truth."""
    if ap_mode not in AP_MODES:
        raise ValueError(f"ap_mode must be one of {AP_MODES}, got {ap_mode!r}")
    if len(model_outputs) != len(gt):
        raise ValueError(
            f"misaligned evaluation set: {len(model_outputs)} outputs vs "
            f"{len(gt)} ground-truth masks"
        )
    if len(model_outputs) == 0:
        raise ValueError("empty evaluation set")
    for probs, masks in zip(model_outputs, gt):
        if np.asarray(probs).shape != np.asarray(masks).shape:
            raise ValueError("output/ground-truth shape mismatch within the set")

    extract = connected_components if ap_mode == "component" else _image_mode_components
    per_class = {}
    for cls in LesionClass:
        c = cls.channel_index
        inter_total = 0.0
        union_total = 0.0
        pred_components = []
        gt_components = []
        for probs, masks in zip(model_outputs, gt):
            pred = binarize(np.asarray(probs)[c], tau)
            target = np.asarray(masks)[c] > 0
            inter = float(np.logical_and(pred, target).sum())
            inter_total += inter
            union_total += float(np.count_nonzero(pred)) + float(target.sum()) - inter
            pred_components.append(extract(pred))
            gt_components.append(extract(target))
        per_class[cls] = {
            "ap": average_precision(pred_components, gt_components, thresholds),
            "iou": (inter_total + eps) / (union_total + eps),
        }

    return MetricsReport(
        per_class=per_class,
        map=float(np.mean([v["ap"] for v in per_class.values()])),
        miou=float(np.mean([v["iou"] for v in per_class.values()])),
        thresholds=tuple(thresholds),
        binarization_tau=tau,
        ap_mode=ap_mode,
    )
