"""Slow, obviously-correct reference implementations used by several test modules."""

import numpy as np


def raster_iou(a, b, size=128):
    """IoU of two integer (x, y, w, h) boxes by counting covered grid cells."""
    ma = np.zeros((size, size), bool)
    mb = np.zeros((size, size), bool)
    ma[a[1]:a[1] + a[3], a[0]:a[0] + a[2]] = True
    mb[b[1]:b[1] + b[3], b[0]:b[0] + b[2]] = True
    union = np.count_nonzero(ma | mb)
    return 0.0 if union == 0 else np.count_nonzero(ma & mb) / union


def scalar_iou(a, b):
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return 0.0 if union <= 0 else inter / union


def greedy_nms_reference(boxes, scores, thr):
    """Greedy suppression with Python loops; ties resolved by lower index."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(scalar_iou(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
    return kept


def satisfies_greedy(boxes, scores, thr, kept):
    """Pairwise check: a box is kept iff no higher-ranked kept box overlaps it beyond thr."""
    rank = {i: r for r, i in enumerate(sorted(range(len(boxes)), key=lambda i: (-scores[i], i)))}
    kept_set = set(kept)
    for i in range(len(boxes)):
        blocked = any(
            rank[j] < rank[i] and scalar_iou(boxes[i], boxes[j]) > thr for j in kept_set
        )
        if (i in kept_set) == blocked:
            return False
    return [rank[i] for i in kept] == sorted(rank[i] for i in kept)


def greedy_match_reference(det_boxes, det_scores, gt_boxes, thr):
    """Score-ordered matching scanning every ground truth per detection."""
    order = sorted(range(len(det_boxes)), key=lambda i: (-det_scores[i], i))
    used = [False] * len(gt_boxes)
    tp = 0
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_boxes):
            if used[j]:
                continue
            v = scalar_iou(det_boxes[i], g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= thr:
            used[best_j] = True
            tp += 1
    return tp, len(det_boxes) - tp, len(gt_boxes) - tp
