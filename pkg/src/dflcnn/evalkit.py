"""Detection-to-ground-truth matching, recall/precision/F1 and IoU sweeps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxgeom import Box, Detection, boxes_to_array, iou_matrix
from .datapipe import atomic_write_text
from .errors import ParseError

DEFAULT_IOU = 0.3


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    det_matched: list[bool] = field(default_factory=list)
    gt_matched: list[bool] = field(default_factory=list)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
            self.det_matched + other.det_matched, self.gt_matched + other.gt_matched,
        )


@dataclass
class EvalReport:
    rr: float
    pr: float
    f1: float
    operating_iou: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    curve: list[tuple[float, float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "operating_iou": self.operating_iou,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "recall": self.rr, "precision": self.pr, "f1": self.f1,
            "curve": [{"iou": i, "recall": r, "precision": p} for i, r, p in self.curve],
        }


def _as_boxes(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.reshape(-1, 4)
    return boxes_to_array([d.box if isinstance(d, Detection) else d for d in items])


def match_detections(dets: Sequence[Detection], gts: Sequence[Box], iou_threshold: float = DEFAULT_IOU) -> MatchResult:
    """Greedy score-ordered one-to-one matching.

    Detections are visited by descending score (ties keep input order); each
    takes the unmatched ground truth of highest IoU (ties to the lower index)
    when that IoU reaches ``iou_threshold``.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    ov = iou_matrix(_as_boxes(dets), _as_boxes(gts))
    order = np.lexsort((np.arange(len(dets)), -scores)) if len(dets) else []
    gt_used = np.zeros(len(gts), dtype=bool)
    det_ok = [False] * len(dets)
    for i in order:
        if not len(gts):
            break
        cand = np.where(gt_used, -1.0, ov[i])
        j = int(cand.argmax())
        if cand[j] >= iou_threshold and not gt_used[j]:
            gt_used[j] = True
            det_ok[i] = True
    tp = int(gt_used.sum())
    return MatchResult(tp, len(dets) - tp, len(gts) - tp, det_ok, gt_used.tolist())


def prf1(m: MatchResult) -> tuple[float, float, float]:
    """Recall TP/(TP+FN), precision TP/(TP+FP) and their harmonic mean; 0/0 -> 0."""
    return rates(m.tp, m.fp, m.fn)


def rates(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    rr = tp / (tp + fn) if tp + fn else 0.0
    pr = tp / (tp + fp) if tp + fp else 0.0
    return rr, pr, f1_score(rr, pr)


def f1_score(rr: float, pr: float) -> float:
    return 2 * rr * pr / (rr + pr) if rr + pr > 0 else 0.0


def sweep_thresholds(start: float = 0.05, stop: float = 0.95, step: float = 0.05) -> list[float]:
    n = int(round((stop - start) / step)) + 1
    return [round(start + k * step, 10) for k in range(n)]


def match_many(pairs: Iterable[tuple[Sequence[Detection], Sequence[Box]]], iou_threshold: float) -> MatchResult:
    total = MatchResult(0, 0, 0)
    for dets, gts in pairs:
        total = total + match_detections(dets, gts, iou_threshold)
    return total


def iou_sweep(dets, gts, thresholds: Sequence[float] | None = None) -> list[tuple[float, float, float]]:
    """(iou, recall, precision) rows; ``dets``/``gts`` are one image or lists of per-image lists."""
    thresholds = sweep_thresholds() if thresholds is None else list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    pairs = _pairs(dets, gts)
    rows = []
    for t in thresholds:
        rr, pr, _ = prf1(match_many(pairs, t))
        rows.append((float(t), rr, pr))
    return rows


def _pairs(dets, gts):
    if dets and isinstance(dets[0], (list, tuple)) or gts and isinstance(gts[0], (list, tuple)):
        return list(zip(dets, gts))
    return [(dets, gts)]


def evaluate(dets, gts, iou_threshold: float = DEFAULT_IOU, thresholds: Sequence[float] | None = None) -> EvalReport:
    pairs = _pairs(dets, gts)
    m = match_many(pairs, iou_threshold)
    rr, pr, f1 = prf1(m)
    curve = iou_sweep([p[0] for p in pairs], [p[1] for p in pairs], thresholds) if pairs else []
    return EvalReport(rr, pr, f1, iou_threshold, m.tp, m.fp, m.fn, curve)


# --------------------------------------------------------------------------
# files


def curve_csv(report: EvalReport) -> str:
    lines = ["iou,recall,precision"]
    lines += [f"{i:.6f},{r:.6f},{p:.6f}" for i, r, p in report.curve]
    return "\n".join(lines) + "\n"


def write_curve_csv(report: EvalReport, path) -> None:
    if not report.curve:
        raise ValueError("report has an empty curve")
    atomic_write_text(path, curve_csv(report))


def curve_svg(report: EvalReport, width: int = 480, height: int = 360) -> str:
    """Recall and precision against the IoU threshold as two polylines."""
    m = 48
    pw, ph = width - 2 * m, height - 2 * m

    def px(v):
        return m + v * pw

    def py(v):
        return m + (1.0 - v) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{m}" y1="{py(0):.2f}" x2="{px(1):.2f}" y2="{py(0):.2f}" stroke="black"/>',
        f'<line x1="{m}" y1="{py(0):.2f}" x2="{m}" y2="{py(1):.2f}" stroke="black"/>',
    ]
    for k in range(6):
        v = k / 5
        parts.append(f'<text x="{px(v):.2f}" y="{py(0) + 16:.2f}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{m - 6}" y="{py(v) + 3:.2f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{px(0.5):.2f}" y="{height - 8}" font-size="12" text-anchor="middle">IoU threshold</text>')
    for col, colour, label in ((1, "green", "recall"), (2, "red", "precision")):
        pts = " ".join(f"{px(row[0]):.2f},{py(row[col]):.2f}" for row in report.curve)
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{pts}"/>')
        ly = 20 if col == 1 else 34
        parts.append(f'<text x="{width - m}" y="{ly}" font-size="11" fill="{colour}" text-anchor="end">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_curve_svg(report: EvalReport, path) -> None:
    if not report.curve:
        raise ValueError("report has an empty curve")
    atomic_write_text(path, curve_svg(report))


def detections_json(entries: Sequence[tuple[str, Sequence[Detection]]]) -> str:
    doc = [
        {"image": name, "boxes": [[*d.box.as_tuple(), d.score] for d in dets]}
        for name, dets in entries
    ]
    return json.dumps(doc, indent=1) + "\n"


def load_detections(path) -> dict[str, list[Detection]]:
    """Parse a detections file into ``{image: [Detection, ...]}``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ParseError(f"detections file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, list):
        raise ParseError(f"{path}: top level must be a JSON array")
    out: dict[str, list[Detection]] = {}
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or "image" not in entry or "boxes" not in entry:
            raise ParseError(f"{path}: entry {i} needs 'image' and 'boxes'")
        dets = []
        for j, row in enumerate(entry["boxes"]):
            if not isinstance(row, list) or len(row) != 5:
                raise ParseError(f"{path}: entry {i} box {j} must be [x, y, w, h, score]")
            x, y, w, h, s = (float(v) for v in row)
            dets.append(Detection(Box(x, y, w, h), s))
        out.setdefault(entry["image"], []).extend(dets)
    return out
