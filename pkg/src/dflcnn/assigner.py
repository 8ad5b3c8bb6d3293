"""IoU-based labeling of anchors and proposals, and minibatch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .boxgeom import BoxDelta, corner_to_center, encode_array, inside_mask, iou_matrix
from .errors import InvalidThresholds, NoNegatives


class Label(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    IGNORED = 2
    DISCARDED = 3


@dataclass(frozen=True)
class AnchorAssignment:
    anchor_index: int
    label: Label
    gt_index: int | None
    target: BoxDelta | None


@dataclass(frozen=True)
class SamplerConfig:
    rpn_pos: int = 64
    rpn_neg: int = 64
    cls_neg_per_pos: int = 3
    cls_batch: int = 128
    seed: int = 0
    pos_thresh: float = 0.7
    neg_thresh: float = 0.1
    cls_pos_thresh: float = 0.7
    cls_neg_thresh: float = 0.1
    force_gt_match: bool = False

    def __post_init__(self):
        if min(self.rpn_pos, self.rpn_neg, self.cls_neg_per_pos, self.cls_batch) < 1:
            raise ValueError(f"sampler counts must be >= 1: {self}")


class Assignments:
    """Per-box labels stored as arrays; indexing yields :class:`AnchorAssignment`.

    ``targets`` rows are NaN for every non-positive entry and ``gt_index`` is
    -1 there.
    """

    def __init__(self, labels: np.ndarray, gt_index: np.ndarray, targets: np.ndarray, max_iou: np.ndarray):
        self.labels = labels
        self.gt_index = gt_index
        self.targets = targets
        self.max_iou = max_iou

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i: int) -> AnchorAssignment:
        lab = Label(int(self.labels[i]))
        if lab is Label.POSITIVE:
            return AnchorAssignment(i, lab, int(self.gt_index[i]), BoxDelta(*map(float, self.targets[i])))
        return AnchorAssignment(i, lab, None, None)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def indices(self, label: Label) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def signed_labels(self, idx) -> np.ndarray:
        """+1 for positives and -1 otherwise, for the loss functions."""
        return np.where(self.labels[idx] == Label.POSITIVE, 1, -1)


def _label(boxes, refs_center, gt, in_bounds, pos_thresh, neg_thresh, force_gt_match):
    if not 0 <= neg_thresh < pos_thresh <= 1:
        raise InvalidThresholds(f"need 0 <= neg < pos <= 1, got neg={neg_thresh}, pos={pos_thresh}")
    n = len(boxes)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    labels = np.full(n, Label.DISCARDED, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    targets = np.full((n, 4), np.nan)
    max_iou = np.zeros(n)
    live = np.flatnonzero(in_bounds)
    if len(gt) == 0:
        labels[live] = Label.NEGATIVE
        return Assignments(labels, gt_index, targets, max_iou)
    ov = iou_matrix(boxes[live], gt)
    best = ov.argmax(axis=1)  # first maximum, i.e. lowest gt index on ties
    best_iou = ov[np.arange(len(live)), best]
    max_iou[live] = best_iou
    lab = np.full(len(live), Label.IGNORED, dtype=np.int8)
    lab[best_iou < neg_thresh] = Label.NEGATIVE
    pos = best_iou > pos_thresh
    if force_gt_match:
        for g in range(len(gt)):
            col = ov[:, g]
            if col.size and col.max() > 0:
                k = int(col.argmax())
                pos[k] = True
                best[k] = g
    lab[pos] = Label.POSITIVE
    labels[live] = lab
    pos_idx = live[pos]
    if pos_idx.size:
        gt_index[pos_idx] = best[pos]
        targets[pos_idx] = encode_array(gt[best[pos]], refs_center[pos_idx])
    return Assignments(labels, gt_index, targets, max_iou)


def assign_anchors(
    anchors,
    gt_boxes,
    img_w: float,
    img_h: float,
    pos_thresh: float = 0.7,
    neg_thresh: float = 0.1,
    force_gt_match: bool = False,
) -> Assignments:
    """Label anchors positive / negative / ignored / discarded.

    ``anchors`` is an :class:`AnchorGrid` or an (N, 4) center-form array;
    ``gt_boxes`` are corner form.  Anchors leaving the image are discarded
    before any IoU is computed.  IoU strictly above ``pos_thresh`` is
    positive, strictly below ``neg_thresh`` negative, anything else ignored.
    ``force_gt_match`` additionally marks the best anchor of each ground
    truth positive.
    """
    centers = getattr(anchors, "centers", anchors)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 4)
    corners = centers.copy()
    corners[:, 0] -= centers[:, 2] / 2
    corners[:, 1] -= centers[:, 3] / 2
    return _label(corners, centers, gt_boxes, inside_mask(corners, img_w, img_h), pos_thresh, neg_thresh, force_gt_match)


def image_rng(seed: int, counter: int) -> np.random.Generator:
    """Sampling generator derived from the run seed and a per-image counter."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(counter)])))


@dataclass(frozen=True)
class RpnBatch:
    indices: np.ndarray
    n_cls: int
    n_reg: int


def sample_rpn_batch(assignments: Assignments, cfg: SamplerConfig, rng: np.random.Generator) -> RpnBatch:
    """Uniformly sample up to ``rpn_pos`` positives and fill the batch with negatives."""
    pos = assignments.indices(Label.POSITIVE)
    neg = assignments.indices(Label.NEGATIVE)
    if neg.size == 0:
        raise NoNegatives("no negative anchors available for the RPN batch")
    n_pos = min(cfg.rpn_pos, pos.size)
    n_neg = min(cfg.rpn_pos + cfg.rpn_neg - n_pos, neg.size)
    take_pos = np.sort(rng.choice(pos, size=n_pos, replace=False)) if n_pos else pos[:0]
    take_neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    idx = np.concatenate([take_pos, take_neg]).astype(np.int64)
    return RpnBatch(idx, int(idx.size), int(n_pos))


def assign_proposals(proposals, gt_boxes, cfg: SamplerConfig) -> Assignments:
    """Label proposals (corner form) with the proposal itself as encode reference."""
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    refs = corner_to_center(props)
    return _label(props, refs, gt_boxes, np.ones(len(props), bool), cfg.cls_pos_thresh, cfg.cls_neg_thresh, False)


def sample_proposals(assignments: Assignments, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample positives and negatives at most 1:``cls_neg_per_pos`` within ``cls_batch``.

    The ratio caps the negatives; with no positives at all the batch holds
    only negatives, capped at the count a full batch would contain.
    """
    pos = assignments.indices(Label.POSITIVE)
    neg = assignments.indices(Label.NEGATIVE)
    ratio = cfg.cls_neg_per_pos
    pos_cap = max(cfg.cls_batch // (1 + ratio), 1)
    n_pos = min(pos.size, pos_cap)
    neg_cap = ratio * n_pos if n_pos else cfg.cls_batch - pos_cap
    n_neg = min(neg.size, neg_cap, cfg.cls_batch - n_pos)
    take_pos = np.sort(rng.choice(pos, size=n_pos, replace=False)) if n_pos else pos[:0]
    take_neg = np.sort(rng.choice(neg, size=n_neg, replace=False)) if n_neg else neg[:0]
    return np.concatenate([take_pos, take_neg]).astype(np.int64)


def assign_and_sample_proposals(proposals, gt_boxes, cfg: SamplerConfig, rng: np.random.Generator):
    a = assign_proposals(proposals, gt_boxes, cfg)
    return a, sample_proposals(a, cfg, rng)
