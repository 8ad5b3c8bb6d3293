"""Axis-aligned box arithmetic.

Boxes are continuous rectangles in pixel coordinates with the origin at the
top-left of the image.  Two encodings are used:

* corner form ``(x, y, w, h)`` with ``(x, y)`` the top-left corner, and
* center form ``(cx, cy, w, h)``.

Areas are ``w * h`` (no +1 pixel convention).  Scalar helpers operate on
:class:`Box` values; the ``*_array`` variants operate on ``(N, 4)`` arrays in
corner form and back the hot paths of training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateBox, InvalidGrid

ANCHOR_AREAS = (900.0, 2500.0, 4900.0)
# width : height
ANCHOR_RATIOS = ((1, 1), (2, 1), (1, 2))


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def center(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, w, h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


@dataclass(frozen=True)
class Anchor:
    """Anchor box in center form with its (row, col, template) provenance."""

    cx: float
    cy: float
    w: float
    h: float
    grid_index: tuple[int, int, int] = (0, 0, 0)

    @property
    def box(self) -> Box:
        return Box.from_center(self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    tile_origin: tuple[float, float] = (0.0, 0.0)


class AnchorGrid:
    """Anchors for one feature map, stored as an ``(N, 4)`` center-form array.

    Index ``n`` corresponds to cell ``(r, c)`` and template ``k`` with
    ``n = (r * feat_w + c) * T + k``.
    """

    def __init__(self, centers: np.ndarray, grid_index: np.ndarray, feat_h: int, feat_w: int, stride: int):
        self.centers = centers
        self.grid_index = grid_index
        self.feat_h = feat_h
        self.feat_w = feat_w
        self.stride = stride

    @property
    def num_templates(self) -> int:
        return len(self.centers) // (self.feat_h * self.feat_w)

    def corners(self) -> np.ndarray:
        return center_to_corner(self.centers)

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, n: int) -> Anchor:
        cx, cy, w, h = (float(v) for v in self.centers[n])
        return Anchor(cx, cy, w, h, tuple(int(v) for v in self.grid_index[n]))

    def __iter__(self) -> Iterator[Anchor]:
        for n in range(len(self)):
            yield self[n]


def center_to_corner(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = b.copy()
    out[..., 0] = b[..., 0] - b[..., 2] / 2
    out[..., 1] = b[..., 1] - b[..., 3] / 2
    return out


def corner_to_center(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = b.copy()
    out[..., 0] = b[..., 0] + b[..., 2] / 2
    out[..., 1] = b[..., 1] + b[..., 3] / 2
    return out


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    # corner arithmetic can round the intersection slightly past the union
    return min(inter / union, 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form arrays ``(N, 4)`` and ``(M, 4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.minimum(out, 1.0)


def generate_anchors(
    feat_h: int,
    feat_w: int,
    stride: int = 16,
    areas: Sequence[float] = ANCHOR_AREAS,
    ratios: Sequence[tuple[float, float]] = ANCHOR_RATIOS,
) -> AnchorGrid:
    """Anchors centered on every feature cell, templates ordered by area then ratio."""
    if feat_h < 1 or feat_w < 1:
        raise InvalidGrid(f"feature grid must be positive, got {feat_h}x{feat_w}")
    templates = []
    for area in areas:
        for rw, rh in ratios:
            rho = rw / rh
            templates.append((math.sqrt(area * rho), math.sqrt(area / rho)))
    t = np.array(templates)
    k = len(templates)
    rows, cols, ks = np.meshgrid(np.arange(feat_h), np.arange(feat_w), np.arange(k), indexing="ij")
    rows, cols, ks = rows.ravel(), cols.ravel(), ks.ravel()
    centers = np.stack(
        [(cols + 0.5) * stride, (rows + 0.5) * stride, t[ks, 0], t[ks, 1]], axis=1
    ).astype(np.float64)
    grid_index = np.stack([rows, cols, ks], axis=1)
    return AnchorGrid(centers, grid_index, feat_h, feat_w, stride)


def _anchor_tuple(a) -> tuple[float, float, float, float]:
    if isinstance(a, Anchor):
        return (a.cx, a.cy, a.w, a.h)
    if isinstance(a, Box):
        return a.center()
    return tuple(float(v) for v in a)


def encode(p: Box | Anchor, a: Anchor | Box) -> BoxDelta:
    """Regression offsets of box ``p`` relative to the reference ``a``.

    Either argument may be a corner-form :class:`Box` or a center-form
    :class:`Anchor` (or a plain ``(cx, cy, w, h)`` tuple for ``a``).
    """
    px, py, pw, ph = _anchor_tuple(p)
    if pw <= 0 or ph <= 0:
        raise DegenerateBox(f"cannot encode box with extents {pw}x{ph}")
    ax, ay, aw, ah = _anchor_tuple(a)
    return BoxDelta((px - ax) / aw, (py - ay) / ah, math.log(pw / aw), math.log(ph / ah))


def decode(t: BoxDelta, a: Anchor) -> Box:
    ax, ay, aw, ah = _anchor_tuple(a)
    with np.errstate(over="ignore"):
        pw = aw * float(np.exp(t.tw))
        ph = ah * float(np.exp(t.th))
    return Box.from_center(t.tx * aw + ax, t.ty * ah + ay, pw, ph)


def encode_array(p_corner: np.ndarray, ref_center: np.ndarray) -> np.ndarray:
    """Vectorised :func:`encode`; ``p`` in corner form, references in center form."""
    p = corner_to_center(p_corner)
    if np.any(p[:, 2] <= 0) or np.any(p[:, 3] <= 0):
        raise DegenerateBox("cannot encode boxes with non-positive extents")
    a = np.asarray(ref_center, dtype=np.float64)
    return np.stack(
        [
            (p[:, 0] - a[:, 0]) / a[:, 2],
            (p[:, 1] - a[:, 1]) / a[:, 3],
            np.log(p[:, 2] / a[:, 2]),
            np.log(p[:, 3] / a[:, 3]),
        ],
        axis=1,
    )


def decode_array(t: np.ndarray, ref_center: np.ndarray) -> np.ndarray:
    """Vectorised :func:`decode`; returns corner form."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    a = np.asarray(ref_center, dtype=np.float64).reshape(-1, 4)
    with np.errstate(over="ignore"):
        w = a[:, 2] * np.exp(t[:, 2])
        h = a[:, 3] * np.exp(t[:, 3])
    cx = t[:, 0] * a[:, 2] + a[:, 0]
    cy = t[:, 1] * a[:, 3] + a[:, 1]
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def inside_mask(boxes: np.ndarray, img_w: float, img_h: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    with np.errstate(invalid="ignore"):
        return (
            (b[:, 0] >= 0) & (b[:, 1] >= 0)
            & (b[:, 0] + b[:, 2] <= img_w) & (b[:, 1] + b[:, 3] <= img_h)
        )


def clip_array(boxes: np.ndarray, img_w: float, img_h: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    with np.errstate(invalid="ignore"):
        x1 = np.clip(b[:, 0], 0, img_w)
        y1 = np.clip(b[:, 1], 0, img_h)
        x2 = np.clip(b[:, 0] + b[:, 2], 0, img_w)
        y2 = np.clip(b[:, 1] + b[:, 3], 0, img_h)
    return np.stack([x1, y1, np.maximum(x2 - x1, 0.0), np.maximum(y2 - y1, 0.0)], axis=1)


def clip_and_filter(boxes: Sequence[Box], img_w: int, img_h: int, mode: str = "discard") -> list[Box]:
    """Drop boxes leaving the image (``discard``) or intersect them with it (``clip``).

    Non-finite boxes never survive either mode.
    """
    if mode not in ("discard", "clip"):
        raise ValueError(f"unknown mode {mode!r}")
    arr = boxes_to_array(boxes)
    finite = np.all(np.isfinite(arr), axis=1)
    if mode == "discard":
        keep = finite & inside_mask(arr, img_w, img_h)
        return [b for b, k in zip(boxes, keep) if k]
    clipped = clip_array(arr, img_w, img_h)
    return [Box(*map(float, row)) for row, k in zip(clipped, finite) if k]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over corner-form boxes; returns kept indices in keep order.

    Order is by descending score with ties broken toward the lower index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(len(scores)), -scores))
    x1, y1 = boxes[:, 0], boxes[:, 1]
    x2, y2 = x1 + boxes[:, 2], y1 + boxes[:, 3]
    areas = boxes[:, 2] * boxes[:, 3]
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        union = areas[i] + areas[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[ov <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    keep = nms_indices(boxes, np.array([d.score for d in dets]), iou_threshold)
    return [dets[i] for i in keep]
