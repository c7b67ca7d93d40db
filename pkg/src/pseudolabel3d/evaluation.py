"""Recall / precision of pseudo labels against ground truth."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geom3d import ClassId, detections_to_arrays, iou_3d_matrix, score_order


@dataclass(frozen=True)
class ClassThresholds:
    vehicle: float = 0.7
    pedestrian: float = 0.3
    cyclist: float = 0.5

    def __post_init__(self) -> None:
        for v in (self.vehicle, self.pedestrian, self.cyclist):
            if not 0.0 < v < 1.0:
                raise ValueError(f"IoU thresholds must lie in (0, 1), got {v}")

    def for_class(self, cls: ClassId | int) -> float:
        return (self.vehicle, self.pedestrian, self.cyclist)[int(cls)]


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    matched_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    by_class: dict[ClassId, tuple[int, int, int]] = field(default_factory=dict)


def _greedy_match(iou: np.ndarray, order: np.ndarray, thr: float) -> list[tuple[int, int, float]]:
    taken = np.zeros(iou.shape[1], dtype=bool)
    pairs = []
    for i in order:
        if iou.shape[1] == 0:
            break
        cand = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            taken[j] = True
            pairs.append((int(i), j, float(iou[i, j])))
    return pairs


def as_arrays(dets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accept a detection list, a ``(boxes, classes, scores)`` tuple or anything with ``arrays()``."""
    if hasattr(dets, "arrays"):
        return dets.arrays()
    if isinstance(dets, tuple) and len(dets) == 3 and isinstance(dets[0], np.ndarray):
        return dets
    return detections_to_arrays(list(dets))


def _gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(gts, "gt_boxes"):
        return gts.gt_boxes, gts.gt_classes
    boxes, classes, _ = as_arrays(gts)
    return boxes, classes


def match_frame(dets, gts, thresholds: ClassThresholds = ClassThresholds()) -> MatchResult:
    """Score-descending greedy one-to-one matching by 3D IoU, per class.

    ``dets`` is a detection list or ``(boxes, classes, scores)`` arrays; ``gts``
    is a :class:`~pseudolabel3d.detsim.Scene` or a list of detections. Each
    detection claims the unmatched same-class ground truth of highest IoU when
    that IoU reaches the class threshold; equal scores keep list order.
    """
    boxes, classes, scores = as_arrays(dets)
    gboxes, gclasses = _gt_arrays(gts)
    res = MatchResult()
    for cls in ClassId:
        di = np.nonzero(classes == int(cls))[0]
        gi = np.nonzero(gclasses == int(cls))[0]
        if len(di) == 0 and len(gi) == 0:
            continue
        iou = iou_3d_matrix(boxes[di], gboxes[gi])
        pairs = _greedy_match(iou, score_order(scores[di]), thresholds.for_class(cls))
        tp = len(pairs)
        res.by_class[cls] = (tp, len(di) - tp, len(gi) - tp)
        res.matched_pairs.extend((int(di[a]), int(gi[b]), v) for a, b, v in pairs)
        res.tp += tp
        res.fp += len(di) - tp
        res.fn += len(gi) - tp
    return res


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def class_counts(results: Iterable[MatchResult]) -> dict[ClassId, tuple[int, int, int]]:
    totals = {c: [0, 0, 0] for c in ClassId}
    for r in results:
        for c, (tp, fp, fn) in r.by_class.items():
            t = totals[c]
            t[0] += tp
            t[1] += fp
            t[2] += fn
    return {c: tuple(v) for c, v in totals.items()}


def recall_precision(results: Sequence[MatchResult]) -> dict[ClassId, tuple[float | None, float | None]]:
    """Per-class pooled recall and precision; ``None`` where undefined."""
    if not results:
        raise ValueError("recall_precision needs at least one frame")
    out = {}
    for c, (tp, fp, fn) in class_counts(results).items():
        out[c] = (_ratio(tp, tp + fn), _ratio(tp, tp + fp))
    return out


def filter_by_score(dets, c: float):
    """Keep detections with ``score > c``; ``c <= 0`` keeps everything.

    Returns the same kind of container it was given (list or array tuple).
    """
    if isinstance(dets, tuple) and len(dets) == 3 and isinstance(dets[0], np.ndarray):
        if c <= 0.0:
            return dets
        keep = dets[2] > c
        return dets[0][keep], dets[1][keep], dets[2][keep]
    if c <= 0.0:
        return list(dets)
    return [d for d in dets if d.score > c]


@dataclass
class SweepRow:
    c: float
    recall: float | None
    precision: float | None
    tp: int
    fp: int
    fn: int


def threshold_sweep(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence,
    thresholds: ClassThresholds = ClassThresholds(),
    score_grid: Sequence[float] = tuple(np.round(np.arange(0.0, 1.0001, 0.05), 2)),
    cls: ClassId = ClassId.VEHICLE,
) -> list[SweepRow]:
    """Metrics of ``score > c`` filtered detections for each ``c`` in the grid.

    Greedy matching visits detections in score order, so dropping everything
    at or below ``c`` leaves the matches of the survivors unchanged; one full
    matching per frame therefore serves every grid point.
    """
    grid = [float(c) for c in score_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("score_grid must be ascending")
    tp_scores: list[float] = []
    fp_scores: list[float] = []
    n_gt = 0
    for frame_dets, frame_gts in zip(dets, gts):
        _, classes, scores = arr = as_arrays(frame_dets)
        res = match_frame(arr, frame_gts, thresholds)
        matched = np.zeros(len(scores), dtype=bool)
        matched[[i for i, _, _ in res.matched_pairs]] = True
        sel = classes == int(cls)
        tp_scores.extend(scores[sel & matched])
        fp_scores.extend(scores[sel & ~matched])
        n_gt += sum(res.by_class.get(cls, (0, 0, 0))[k] for k in (0, 2))
    tp_s = np.array(tp_scores)
    fp_s = np.array(fp_scores)
    rows = []
    for c in grid:
        tp = int(len(tp_s) if c <= 0 else np.sum(tp_s > c))
        fp = int(len(fp_s) if c <= 0 else np.sum(fp_s > c))
        fn = n_gt - tp
        rows.append(SweepRow(c, _ratio(tp, tp + fn), _ratio(tp, tp + fp), tp, fp, fn))
    return rows


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Plain-text aligned table."""

    def fmt(v):
        if v is None:
            return "undef"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()
