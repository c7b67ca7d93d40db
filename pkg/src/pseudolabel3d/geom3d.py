"""Oriented 3D box geometry: view transforms, rotated IoU and NMS.

Boxes are ``(cx, cy, cz, l, w, h, yaw)`` with ``l`` measured along the heading
and ``yaw`` in ``(-pi, pi]``. Scalar routines operate on :class:`Box3D`; the
``*_matrix`` / ``*_pairs`` routines operate on ``(N, 7)`` float arrays and are
what the pipeline uses in its hot loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

EPS = 1e-9
TWO_PI = 2.0 * math.pi


class ClassId(IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value: "str | int | ClassId") -> "ClassId":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown class {value!r}") from None
        return cls(value)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into ``(-pi, pi]``."""
    y = math.fmod(yaw + math.pi, TWO_PI)
    if y <= 0.0:
        y += TWO_PI
    return y - math.pi


def normalize_yaw_array(yaw: np.ndarray) -> np.ndarray:
    y = np.fmod(np.asarray(yaw, dtype=np.float64) + math.pi, TWO_PI)
    y = np.where(y <= 0.0, y + TWO_PI, y)
    return y - math.pi


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box field in {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        for name in ("cx", "cy", "cz", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.cx, self.cy, self.cz)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box3D":
        return cls(*(float(v) for v in arr[:7]))

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise footprint corners, shape (4, 2)."""
        return box_corners_bev(self.as_array()[None])[0]


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: ClassId
    score: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_id", ClassId.parse(self.class_id))
        s = float(self.score)
        if not (0.0 <= s <= 1.0) or not math.isfinite(s):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "score", s)


@dataclass(frozen=True)
class ViewTransform:
    """Flip(s) about the vertical plane(s), then a rotation about the z axis."""

    flip_x: bool = False
    flip_y: bool = False
    rotation: float = 0.0

    @property
    def is_identity(self) -> bool:
        return not self.flip_x and not self.flip_y and self.rotation == 0.0

    def inverse(self) -> "ViewTransform":
        # F R(-t) == R(t) F for a single reflection; double flip commutes with R.
        single_flip = self.flip_x != self.flip_y
        return ViewTransform(self.flip_x, self.flip_y, self.rotation if single_flip else -self.rotation)

    def key(self) -> int:
        """Stable 64-bit identity used for seeding view-dependent randomness."""
        rot = int(round(self.rotation * 1e9)) & 0xFFFFFFFFFFFF
        return (rot << 2) | (int(self.flip_x) << 1) | int(self.flip_y)


def transform_points(points: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Apply ``t`` to an ``(N, 3+)`` point array; extra columns pass through."""
    pts = np.array(points, dtype=np.float64, copy=True)
    if pts.ndim == 1:
        return transform_points(pts[None], t)[0]
    x = pts[:, 0].copy()
    y = pts[:, 1].copy()
    if t.flip_x:
        x = -x
    if t.flip_y:
        y = -y
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    return pts


def _transform_yaw(yaw, t: ViewTransform):
    if t.flip_x:
        yaw = math.pi - yaw
    if t.flip_y:
        yaw = -yaw
    return yaw + t.rotation


def transform_box(b: Box3D, t: ViewTransform) -> Box3D:
    x, y, z = transform_points(np.array([b.cx, b.cy, b.cz]), t)
    return Box3D(x, y, z, b.l, b.w, b.h, _transform_yaw(b.yaw, t))


def transform_boxes(boxes: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Vectorised :func:`transform_box` over an ``(N, 7)`` array."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    if len(boxes) == 0:
        return out.reshape(0, 7)
    out[:, :3] = transform_points(boxes[:, :3], t)
    out[:, 6] = normalize_yaw_array(_transform_yaw(boxes[:, 6], t))
    return out


def transform_detection(det: Detection, t: ViewTransform) -> Detection:
    return Detection(transform_box(det.box, t), det.class_id, det.score)


# ---------------------------------------------------------------------------
# BEV polygon geometry


def box_corners_bev(boxes: np.ndarray) -> np.ndarray:
    """``(N, 7)`` boxes -> ``(N, 4, 2)`` counter-clockwise footprint corners."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    hl = boxes[:, 3] / 2.0
    hw = boxes[:, 4] / 2.0
    local = np.stack(
        [np.stack([hl, hw], -1), np.stack([-hl, hw], -1), np.stack([-hl, -hw], -1), np.stack([hl, -hw], -1)],
        axis=1,
    )
    c = np.cos(boxes[:, 6])[:, None]
    s = np.sin(boxes[:, 6])[:, None]
    x = c * local[..., 0] - s * local[..., 1] + boxes[:, 0:1]
    y = s * local[..., 0] + c * local[..., 1] + boxes[:, 1:2]
    return np.stack([x, y], axis=-1)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_convex_polygon(subject: Sequence[Sequence[float]], clip: Sequence[Sequence[float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex polygon ``clip``."""
    output = [tuple(map(float, p)) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        polygon = output
        output = []
        prev = polygon[-1]
        prev_side = _cross(a, b, prev)
        for cur in polygon:
            cur_side = _cross(a, b, cur)
            if cur_side >= -EPS:
                if prev_side < -EPS:
                    output.append(_line_intersection(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= -EPS:
                output.append(_line_intersection(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _line_intersection(p, q, dp: float, dq: float) -> tuple[float, float]:
    t = dp / (dp - dq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_area(poly: Sequence[Sequence[float]]) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    for i in range(len(poly)):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % len(poly)]
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    ra = math.hypot(a.l, a.w) / 2.0
    rb = math.hypot(b.l, b.w) / 2.0
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    return polygon_area(clip_convex_polygon(a.bev_corners(), b.bev_corners()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    dz = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


# ---------------------------------------------------------------------------
# Vectorised intersection (convex hull of candidate vertices)


def bev_intersection_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Footprint intersection areas of row-aligned box pairs ``a[i]``, ``b[i]``.

    The intersection polygon is the set of corners of each box lying inside the
    other plus all edge/edge crossings; its vertices are ordered by angle about
    their mean and the area follows from the shoelace formula.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    n = len(a)
    if n == 0:
        return np.zeros(0)
    ca = box_corners_bev(a)
    cb = box_corners_bev(b)

    def inside(pts, poly):
        # pts (n, k, 2), poly (n, 4, 2) CCW
        e0 = poly
        e1 = np.roll(poly, -1, axis=1)
        ex = (e1 - e0)[:, None, :, :]
        rel = pts[:, :, None, :] - e0[:, None, :, :]
        cr = ex[..., 0] * rel[..., 1] - ex[..., 1] * rel[..., 0]
        return np.all(cr >= -EPS, axis=2)

    in_a = inside(ca, cb)
    in_b = inside(cb, ca)

    a0 = ca[:, :, None, :]
    a1 = np.roll(ca, -1, axis=1)[:, :, None, :]
    b0 = cb[:, None, :, :]
    b1 = np.roll(cb, -1, axis=1)[:, None, :, :]
    r = a1 - a0
    s = b1 - b0
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = b0 - a0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    ok = (np.abs(denom) > EPS) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(ok, t, 0.0)
    xpts = (a0 + t[..., None] * r).reshape(n, 16, 2)
    ok = ok.reshape(n, 16)

    pts = np.concatenate([ca, cb, xpts], axis=1)
    mask = np.concatenate([in_a, in_b, ok], axis=1)
    count = mask.sum(axis=1)
    safe = np.maximum(count, 1)[:, None]
    centroid = (pts * mask[..., None]).sum(axis=1) / safe
    rel = pts - centroid[:, None, :]
    ang = np.arctan2(rel[..., 1], rel[..., 0])
    ang = np.where(mask, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    sorted_pts = np.take_along_axis(pts, order[..., None], axis=1)
    sorted_mask = np.take_along_axis(mask, order, axis=1)
    first = sorted_pts[:, :1, :]
    sorted_pts = np.where(sorted_mask[..., None], sorted_pts, first)
    nxt = np.roll(sorted_pts, -1, axis=1)
    area = 0.5 * np.abs(np.sum(sorted_pts[..., 0] * nxt[..., 1] - nxt[..., 0] * sorted_pts[..., 1], axis=1))
    return np.where(count >= 3, area, 0.0)


def _candidate_pairs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ra = np.hypot(a[:, 3], a[:, 4]) / 2.0
    rb = np.hypot(b[:, 3], b[:, 4]) / 2.0
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return np.nonzero(d < ra[:, None] + rb[None, :])


def bev_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU between ``(N, 7)`` and ``(M, 7)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    i, j = _candidate_pairs(a, b)
    if len(i):
        inter = bev_intersection_pairs(a[i], b[j])
        union = a[i, 3] * a[i, 4] + b[j, 3] * b[j, 4] - inter
        out[i, j] = np.clip(inter / union, 0.0, 1.0)
    return out


def iou_3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 3D IoU between ``(N, 7)`` and ``(M, 7)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    i, j = _candidate_pairs(a, b)
    if len(i):
        top = np.minimum(a[i, 2] + a[i, 5] / 2, b[j, 2] + b[j, 5] / 2)
        bot = np.maximum(a[i, 2] - a[i, 5] / 2, b[j, 2] - b[j, 5] / 2)
        dz = np.maximum(top - bot, 0.0)
        inter = bev_intersection_pairs(a[i], b[j]) * dz
        va = a[i, 3] * a[i, 4] * a[i, 5]
        vb = b[j, 3] * b[j, 4] * b[j, 5]
        out[i, j] = np.clip(inter / (va + vb - inter), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Detection list helpers and NMS


def detections_to_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split detections into ``(boxes (N, 7), class_ids (N,), scores (N,))``."""
    if not dets:
        return np.zeros((0, 7)), np.zeros(0, dtype=np.int64), np.zeros(0)
    boxes = np.array([d.box.as_array() for d in dets])
    classes = np.array([int(d.class_id) for d in dets], dtype=np.int64)
    scores = np.array([d.score for d in dets])
    return boxes, classes, scores


def arrays_to_detections(boxes: np.ndarray, classes: Iterable[int], scores: Iterable[float]) -> list[Detection]:
    return [
        Detection(Box3D.from_array(b), ClassId(int(c)), float(min(1.0, max(0.0, s))))
        for b, c, s in zip(boxes, classes, scores)
    ]


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep list order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def iou_one_to_many(box: np.ndarray, others: np.ndarray, mode: str = "bev") -> np.ndarray:
    """IoU of one ``(7,)`` box against ``(M, 7)`` boxes."""
    others = np.asarray(others, dtype=np.float64).reshape(-1, 7)
    box = np.asarray(box, dtype=np.float64).reshape(7)
    out = np.zeros(len(others))
    reach = np.hypot(box[3], box[4]) / 2.0 + np.hypot(others[:, 3], others[:, 4]) / 2.0
    near = np.nonzero(np.hypot(others[:, 0] - box[0], others[:, 1] - box[1]) < reach)[0]
    if len(near) == 0:
        return out
    o = others[near]
    inter = bev_intersection_pairs(np.broadcast_to(box, o.shape), o)
    if mode == "bev":
        out[near] = np.clip(inter / (box[3] * box[4] + o[:, 3] * o[:, 4] - inter), 0.0, 1.0)
    else:
        top = np.minimum(box[2] + box[5] / 2, o[:, 2] + o[:, 5] / 2)
        bot = np.maximum(box[2] - box[5] / 2, o[:, 2] - o[:, 5] / 2)
        vol = inter * np.maximum(top - bot, 0.0)
        union = box[3] * box[4] * box[5] + o[:, 3] * o[:, 4] * o[:, 5] - vol
        out[near] = np.clip(vol / union, 0.0, 1.0)
    return out


def nms_indices(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray, iou_threshold: float, mode: str = "bev") -> np.ndarray:
    """Indices of NMS survivors, ordered by descending score (ties: lower index first)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if mode not in ("bev", "3d"):
        raise ValueError(f"mode must be 'bev' or '3d', got {mode!r}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    keep: list[int] = []
    for cls in np.unique(classes):
        idx = np.nonzero(classes == cls)[0]
        idx = idx[score_order(scores[idx])]
        sub = boxes[idx]
        alive = np.ones(len(idx), dtype=bool)
        for k in range(len(idx)):
            if not alive[k]:
                continue
            keep.append(int(idx[k]))
            rest = k + 1 + np.nonzero(alive[k + 1 :])[0]
            if len(rest):
                alive[rest[iou_one_to_many(sub[k], sub[rest], mode) > iou_threshold]] = False
    keep_arr = np.sort(np.array(keep, dtype=np.int64))
    return keep_arr[score_order(scores[keep_arr])]


def nms(dets: Sequence[Detection], iou_threshold: float, mode: str = "bev") -> list[Detection]:
    """Greedy per-class NMS; output sorted by descending score."""
    boxes, classes, scores = detections_to_arrays(dets)
    if len(dets) == 0:
        nms_indices(boxes, classes, scores, iou_threshold, mode)  # validates arguments
        return []
    return [dets[i] for i in nms_indices(boxes, classes, scores, iou_threshold, mode)]
