"""Slow, loop-based re-implementations used to cross-check the metrics.

Deliberately written without scipy or vectorized counting so they share no
code path with the package: BFS flood fill for components, per-pixel loops
for intersections, pixel-coordinate sets for component IoU.
"""

from collections import deque

import numpy as np

NEIGHBORS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1),
               (0, 1), (1, -1), (1, 0), (1, 1)]


def bfs_components(mask):
    """8-connected components as frozensets of (y, x) pixel coordinates."""
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    components = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            pixels = []
            queue = deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                pixels.append((cy, cx))
                for dy, dx in NEIGHBORS_8:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            components.append(frozenset(pixels))
    return components


def pixel_counts(pred, gt):
    inter = n_pred = n_gt = 0
    for a, b in zip(np.asarray(pred).ravel().tolist(),
                    np.asarray(gt).ravel().tolist()):
        pa = 1 if a else 0
        tb = 1 if b else 0
        inter += pa * tb
        n_pred += pa
        n_gt += tb
    return inter, n_pred, n_gt


def set_iou(a, b):
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def greedy_ap(preds_per_image, gts_per_image, thresholds):
    """Greedy descending-IoU one-to-one matching, then mean precision.

    The final mean uses np.mean so the reduction order matches the library
    bit for bit; everything upstream of it (components, matching, counts)
    is computed independently.
    """
    n_pred = sum(len(p) for p in preds_per_image)
    matched = []
    for preds, gts in zip(preds_per_image, gts_per_image):
        pairs = []
        for i, p in enumerate(preds):
            for j, g in enumerate(gts):
                value = set_iou(p, g)
                if value > 0:
                    pairs.append((value, i, j))
        pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_p, used_g = set(), set()
        for value, i, j in pairs:
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            matched.append(value)
    precisions = []
    for t in thresholds:
        hits = sum(1 for v in matched if v >= t)
        precisions.append(0.0 if n_pred == 0 else hits / n_pred)
    return float(np.mean(precisions))


def whole_mask_components(mask):
    mask = np.asarray(mask) > 0
    if not mask.any():
        return []
    return [frozenset((y, x) for y, x in zip(*np.nonzero(mask)))]


def oracle_evaluate(probs_list, gt_list, tau=0.5, eps=1e-6,
                    ap_mode="component", thresholds=None):
    """Returns {class_index: {"ap": .., "iou": ..}} plus macro means."""
    if thresholds is None:
        thresholds = [0.50 + 0.05 * i for i in range(10)]
    extract = bfs_components if ap_mode == "component" else whole_mask_components
    n_classes = np.asarray(probs_list[0]).shape[0]
    per_class = {}
    for c in range(n_classes):
        inter_total = pred_total = gt_total = 0
        preds_per_image, gts_per_image = [], []
        for probs, gt in zip(probs_list, gt_list):
            pred = np.asarray(probs)[c] > tau
            target = np.asarray(gt)[c] > 0
            inter, n_p, n_g = pixel_counts(pred, target)
            inter_total += inter
            pred_total += n_p
            gt_total += n_g
            preds_per_image.append(extract(pred))
            gts_per_image.append(extract(target))
        union = pred_total + gt_total - inter_total
        per_class[c] = {
            "ap": greedy_ap(preds_per_image, gts_per_image, thresholds),
            "iou": (inter_total + eps) / (union + eps),
        }
    aps = [v["ap"] for v in per_class.values()]
    ious = [v["iou"] for v in per_class.values()]
    return per_class, float(np.mean(aps)), float(np.mean(ious))
