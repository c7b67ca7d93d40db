"""Synthetic LiDAR-like scenes and a view-seeded noisy detector.

The detector is a stand-in for a trained teacher network: it sees the ground
truth through a :class:`NoiseModel` that drops objects (more often with range),
jitters the surviving boxes and injects false positives. Every random draw is
keyed on ``(base_seed, epoch_id, frame_id, ..., view)`` so results are a pure
function of their inputs and different views miss different objects.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom3d import (
    Box3D,
    ClassId,
    Detection,
    ViewTransform,
    arrays_to_detections,
    normalize_yaw_array,
    transform_boxes,
    transform_points,
)

SURFACE_INSET = 0.002

DEFAULT_SIZE_PRIORS: dict[str, tuple[float, float, float]] = {
    "Vehicle": (4.5, 1.9, 1.6),
    "Pedestrian": (0.8, 0.8, 1.7),
    "Cyclist": (1.8, 0.6, 1.7),
}


@dataclass
class SceneConfig:
    extent_x: float = 150.0
    extent_y: float = 150.0
    min_range: float = 3.0
    object_counts: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {"Vehicle": (15, 30), "Pedestrian": (0, 10), "Cyclist": (0, 6)}
    )
    size_priors: dict[str, tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_SIZE_PRIORS))
    size_jitter: float = 0.08
    # surface points on a vehicle-sized box at ref_range; falls off as 1/r^2 beyond
    points_ref: float = 400.0
    ref_range: float = 10.0
    occlusion_prob: float = 0.155
    clutter_points: int = 3000
    clutter_height: float = 2.0
    # unlabelled object-like structures (parked trailers, bins, poles): surface
    # points but no ground truth; some persistent detector FPs land on them
    distractor_count: tuple[int, int] = (2, 6)

    def validate(self) -> None:
        if not self.object_counts or all(hi <= 0 for _, hi in self.object_counts.values()):
            raise ValueError("scene config needs a non-empty class mix")
        for name, (lo, hi) in self.object_counts.items():
            ClassId.parse(name)
            if lo < 0 or hi < lo:
                raise ValueError(f"bad object count range for {name}: ({lo}, {hi})")
            if name not in self.size_priors:
                raise ValueError(f"no size prior for {name}")
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ValueError("scene extents must be positive")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be a probability")
        lo, hi = self.distractor_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad distractor count range {self.distractor_count}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "object_counts" in d:
            d["object_counts"] = {k: tuple(v) for k, v in d["object_counts"].items()}
        if "size_priors" in d:
            d["size_priors"] = {k: tuple(v) for k, v in d["size_priors"].items()}
        if "distractor_count" in d:
            d["distractor_count"] = tuple(d["distractor_count"])
        return cls(**d)


@dataclass
class Scene:
    gt_boxes: np.ndarray  # (N, 7)
    gt_classes: np.ndarray  # (N,) int
    points: np.ndarray  # (P, 4) float32: x, y, z, intensity
    frame_id: int = 0
    occluded: np.ndarray | None = None  # (N,) bool, no surface points
    distractor_boxes: np.ndarray | None = None  # (D, 7) unlabelled structures
    distractor_classes: np.ndarray | None = None  # (D,) class they resemble

    def __post_init__(self) -> None:
        self.distractor_boxes = np.zeros((0, 7)) if self.distractor_boxes is None else np.asarray(self.distractor_boxes, dtype=np.float64).reshape(-1, 7)
        self.distractor_classes = (
            np.zeros(0, np.int64) if self.distractor_classes is None else np.asarray(self.distractor_classes, dtype=np.int64).reshape(-1)
        )
        if len(self.distractor_boxes) != len(self.distractor_classes):
            raise ValueError("distractor boxes and classes differ in length")
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 7)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if self.occluded is None:
            self.occluded = points_in_boxes(self.points[:, :3], self.gt_boxes).sum(axis=0) == 0
        self.occluded = np.asarray(self.occluded, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return len(self.gt_boxes)

    def gt_detections(self) -> list[Detection]:
        return arrays_to_detections(self.gt_boxes, self.gt_classes, np.ones(len(self)))

    def transformed(self, view: ViewTransform) -> "Scene":
        pts = self.points.astype(np.float64)
        pts = transform_points(pts, view) if len(pts) else pts
        return Scene(
            transform_boxes(self.gt_boxes, view),
            self.gt_classes,
            pts,
            self.frame_id,
            self.occluded,
            transform_boxes(self.distractor_boxes, view),
            self.distractor_classes,
        )


def points_in_boxes(points: np.ndarray, boxes: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """``(P, N)`` mask of points inside each (optionally enlarged) box."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    dx = points[:, None, 0] - boxes[None, :, 0]
    dy = points[:, None, 1] - boxes[None, :, 1]
    c = np.cos(boxes[:, 6])
    s = np.sin(boxes[:, 6])
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    lz = points[:, None, 2] - boxes[None, :, 2]
    return (
        (np.abs(lx) <= boxes[:, 3] * scale / 2)
        & (np.abs(ly) <= boxes[:, 4] * scale / 2)
        & (np.abs(lz) <= boxes[:, 5] * scale / 2)
    )


def _sample_surface(rng: np.random.Generator, box: np.ndarray, n: int) -> np.ndarray:
    l, w, h = box[3:6]
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    dims = np.array([l, w, h])
    # a hair inside the face so float32 storage cannot push points out of the box
    u[np.arange(n), axis] = sign * (dims[axis] / 2.0 - SURFACE_INSET)
    c, s = math.cos(box[6]), math.sin(box[6])
    x = c * u[:, 0] - s * u[:, 1] + box[0]
    y = s * u[:, 0] + c * u[:, 1] + box[1]
    z = u[:, 2] + box[2]
    return np.stack([x, y, z], axis=1)


def _place(rng, config: SceneConfig, cls: ClassId, count: int, boxes: list, classes: list, radii: list) -> None:
    """Append ``count`` non-overlapping boxes of ``cls`` (in place)."""
    hx, hy = config.extent_x / 2.0, config.extent_y / 2.0
    prior = np.asarray(config.size_priors[cls.label], dtype=np.float64)
    placed = 0
    attempts = 0
    while placed < count:
        attempts += 1
        if attempts > 1000 * (count + 1):
            raise RuntimeError(f"could not place {count} {cls.label} boxes without overlap")
        size = prior * np.exp(rng.normal(0.0, config.size_jitter, 3))
        x, y = rng.uniform(-hx, hx), rng.uniform(-hy, hy)
        yaw = rng.uniform(-math.pi, math.pi)
        r = math.hypot(size[0], size[1]) / 2.0
        if math.hypot(x, y) < config.min_range + r:
            continue
        # keep the whole footprint inside the scene extent
        if abs(x) + r > hx or abs(y) + r > hy:
            continue
        if any(math.hypot(x - b[0], y - b[1]) < r + rb for b, rb in zip(boxes, radii)):
            continue
        boxes.append(np.array([x, y, size[2] / 2.0, size[0], size[1], size[2], yaw]))
        classes.append(int(cls))
        radii.append(r)
        placed += 1


def _surface_points(rng, config: SceneConfig, boxes: np.ndarray, occlusion_prob: float) -> tuple[list[np.ndarray], np.ndarray]:
    vehicle_area = _surface_area(np.array(config.size_priors.get("Vehicle", DEFAULT_SIZE_PRIORS["Vehicle"])))
    surface: list[np.ndarray] = []
    occluded = np.zeros(len(boxes), dtype=bool)
    for i, b in enumerate(boxes):
        rng_range = math.hypot(b[0], b[1])
        lam = config.points_ref * _surface_area(b[3:6]) / vehicle_area
        lam *= min(1.0, (config.ref_range / max(rng_range, 1e-6)) ** 2)
        n = int(rng.poisson(lam))
        if rng.uniform() < occlusion_prob:
            n = 0
        occluded[i] = n == 0
        if n:
            surface.append(_sample_surface(rng, b, n))
    return surface, occluded


def generate_scene(config: SceneConfig, seed: int, frame_id: int = 0) -> Scene:
    """Sample a reproducible scene; sensor at the origin, ground plane z = 0."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(frame_id), 0x5CE7E]))
    hx, hy = config.extent_x / 2.0, config.extent_y / 2.0

    boxes: list[np.ndarray] = []
    classes: list[int] = []
    radii: list[float] = []
    for name, (lo, hi) in config.object_counts.items():
        count = int(rng.integers(lo, hi + 1))
        _place(rng, config, ClassId.parse(name), count, boxes, classes, radii)

    gt = np.array(boxes).reshape(-1, 7)
    gt[:, 6] = normalize_yaw_array(gt[:, 6])
    surface, occluded = _surface_points(rng, config, gt, config.occlusion_prob)
    clutter = np.stack(
        [
            rng.uniform(-hx, hx, config.clutter_points),
            rng.uniform(-hy, hy, config.clutter_points),
            rng.uniform(0.0, config.clutter_height, config.clutter_points),
        ],
        axis=1,
    )
    intensity = rng.uniform(0.0, 1.0, sum(len(p) for p in surface) + len(clutter))

    # distractors use their own stream so the labelled part of the scene does
    # not depend on how many of them there are
    d_rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(frame_id), 0xD157]))
    weights = np.array([lo + hi for lo, hi in config.object_counts.values()], dtype=np.float64)
    names = list(config.object_counts)
    n_d = int(d_rng.integers(config.distractor_count[0], config.distractor_count[1] + 1))
    d_boxes, d_classes = list(gt), list(classes)
    radii = [math.hypot(b[3], b[4]) / 2.0 for b in gt]
    for pick in d_rng.choice(len(names), size=n_d, p=weights / weights.sum()):
        _place(d_rng, config, ClassId.parse(names[pick]), 1, d_boxes, d_classes, radii)
    d_boxes = np.array(d_boxes[len(gt) :]).reshape(-1, 7)
    d_boxes[:, 6] = normalize_yaw_array(d_boxes[:, 6])
    d_surface, _ = _surface_points(d_rng, config, d_boxes, 0.0)
    d_intensity = d_rng.uniform(0.0, 1.0, sum(len(p) for p in d_surface))

    xyz = np.concatenate(surface + [clutter] + d_surface, axis=0)
    intensity = np.concatenate([intensity, d_intensity])
    points = np.concatenate([xyz, intensity[:, None]], axis=1).astype(np.float32)
    return Scene(
        gt,
        np.array(classes, dtype=np.int64),
        points,
        int(frame_id),
        occluded,
        d_boxes,
        np.array(d_classes[len(gt) :], dtype=np.int64),
    )


def _surface_area(lwh: np.ndarray) -> float:
    l, w, h = (float(v) for v in lwh)
    return 2.0 * (l * w + l * h + w * h)


def generate_scenes(config: SceneConfig, seed: int, n: int, start_frame: int = 0) -> list[Scene]:
    return [generate_scene(config, seed, start_frame + i) for i in range(n)]


# ---------------------------------------------------------------------------
# Detector


@dataclass(frozen=True)
class NoiseModel:
    fn_base: float = 0.02
    fn_distance_coeff: float = 0.0007
    fp_rate: float = 40.0
    loc_sigma: float = 0.06
    yaw_sigma: float = 0.02
    size_sigma: float = 0.02
    score_tp_mean: float = 0.7
    score_fp_mean: float = 0.16
    epoch_id: int = 0
    score_tp_concentration: float = 3.0
    score_fp_concentration: float = 30.0
    # logit-space std of the per-view score around each box's own score
    score_view_sigma: float = 0.3
    # fraction of false positives that are scene structures every view sees
    fp_shared_frac: float = 0.85
    fp_extent: float = 75.0
    fp_class_probs: tuple[float, float, float] = (0.6, 0.25, 0.15)
    # miss probability for boxes without surface points
    fn_occluded: float = 1.0
    # share of persistent FPs that sit on an unlabelled scene structure
    fp_distractor_frac: float = 0.5

    def __post_init__(self) -> None:
        for name in ("fn_base", "fn_distance_coeff", "fp_shared_frac", "fn_occluded", "fp_distractor_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("fp_rate", "loc_sigma", "yaw_sigma", "size_sigma", "score_view_sigma", "fp_extent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("score_tp_concentration", "score_fp_concentration"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("score_tp_mean", "score_fp_mean"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        probs = np.asarray(self.fp_class_probs, dtype=np.float64)
        if len(probs) != 3 or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("fp_class_probs must be 3 probabilities summing to 1")
        object.__setattr__(self, "fp_class_probs", tuple(float(p) for p in probs))

    @classmethod
    def noiseless(cls, epoch_id: int = 0) -> "NoiseModel":
        return cls(
            fn_base=0.0,
            fn_distance_coeff=0.0,
            fp_rate=0.0,
            loc_sigma=0.0,
            yaw_sigma=0.0,
            size_sigma=0.0,
            score_tp_mean=1.0,
            score_view_sigma=0.0,
            epoch_id=epoch_id,
            fn_occluded=0.0,
        )

    def miss_probability(self, ranges: np.ndarray) -> np.ndarray:
        return np.clip(self.fn_base + self.fn_distance_coeff * np.asarray(ranges), 0.0, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fp_class_probs"] = list(self.fp_class_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        d = dict(d)
        if "fp_class_probs" in d:
            d["fp_class_probs"] = tuple(d["fp_class_probs"])
        return cls(**d)


@dataclass(frozen=True)
class DetectorHandle:
    noise: NoiseModel
    base_seed: int = 0


MASK64 = 0xFFFFFFFFFFFFFFFF


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_uniform(*keys) -> np.ndarray:
    """Uniform [0, 1) values from a 64-bit mix of integer keys (broadcast)."""
    words = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            words.append(np.uint64(int(k) & MASK64))
        else:
            words.append(np.asarray(k).astype(np.int64).astype(np.uint64))
    arrays = np.broadcast_arrays(*words)
    h = np.zeros(arrays[0].shape, dtype=np.uint64)
    for k in arrays:
        h = _splitmix(h ^ k)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _seed_words(*keys: int) -> list[int]:
    words: list[int] = []
    for k in keys:
        k = int(k) & MASK64
        words.extend([k & 0xFFFFFFFF, k >> 32])
    return words


def _beta_scores(rng: np.random.Generator, mean: float, concentration: float, n: int) -> np.ndarray:
    if mean >= 1.0:
        return np.ones(n)
    if mean <= 0.0:
        return np.zeros(n)
    return rng.beta(mean * concentration, (1.0 - mean) * concentration, size=n)


def _view_scores(rng: np.random.Generator, base: np.ndarray, sigma: float) -> np.ndarray:
    """Per-view score: the box's own score jittered in logit space."""
    eps = rng.normal(0.0, 1.0, len(base)) * sigma
    if sigma == 0.0:
        return base.copy()
    b = np.clip(base, 1e-6, 1.0 - 1e-6)
    logit = np.log(b) - np.log1p(-b)
    out = 1.0 / (1.0 + np.exp(-(logit + eps)))
    return np.where(base >= 1.0, 1.0, np.where(base <= 0.0, 0.0, out))


def _random_boxes(rng: np.random.Generator, noise: NoiseModel, n: int) -> tuple[np.ndarray, np.ndarray]:
    classes = rng.choice(3, size=n, p=np.asarray(noise.fp_class_probs))
    names = [ClassId(int(c)).label for c in classes]
    prior = np.array([DEFAULT_SIZE_PRIORS[nm] for nm in names]).reshape(-1, 3)
    size = prior * np.exp(rng.normal(0.0, 0.08, (n, 3)))
    xy = rng.uniform(-noise.fp_extent, noise.fp_extent, (n, 2))
    yaw = rng.uniform(-math.pi, math.pi, n)
    boxes = np.concatenate([xy, size[:, 2:3] / 2.0, size, yaw[:, None]], axis=1)
    return boxes.reshape(-1, 7), classes.astype(np.int64)


def _jitter(rng: np.random.Generator, boxes: np.ndarray, noise: NoiseModel) -> np.ndarray:
    n = len(boxes)
    eps_c = rng.normal(0.0, 1.0, (n, 3)) * noise.loc_sigma
    eps_c[:, 2] *= 0.5
    eps_s = rng.normal(0.0, 1.0, (n, 3)) * noise.size_sigma
    eps_y = rng.normal(0.0, 1.0, n) * noise.yaw_sigma
    out = boxes.copy()
    out[:, :3] += eps_c
    out[:, 3:6] *= np.exp(eps_s)
    out[:, 6] += eps_y
    return out


def detect(d: DetectorHandle, scene: Scene, view: ViewTransform) -> list[Detection]:
    """Noisy detections of ``scene`` as seen through ``view`` (view frame)."""
    return arrays_to_detections(*detect_arrays(d, scene, view))


def detect_arrays(d: DetectorHandle, scene: Scene, view: ViewTransform) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """:func:`detect` as ``(boxes, classes, scores)`` arrays."""
    noise = d.noise
    view_key = view.key()
    gt_view = transform_boxes(scene.gt_boxes, view)
    n = len(gt_view)

    ranges = np.hypot(scene.gt_boxes[:, 0], scene.gt_boxes[:, 1])
    p_miss = noise.miss_probability(ranges)
    p_miss = np.where(scene.occluded, np.maximum(p_miss, noise.fn_occluded), p_miss)
    u = hash_uniform(d.base_seed, noise.epoch_id, scene.frame_id, np.arange(n), view_key) if n else np.zeros(0)
    hit = u >= p_miss

    frame_rng = np.random.default_rng(np.random.SeedSequence(_seed_words(d.base_seed, noise.epoch_id, scene.frame_id, 2)))
    tp_base = _beta_scores(frame_rng, noise.score_tp_mean, noise.score_tp_concentration, n)
    n_shared = int(frame_rng.poisson(noise.fp_rate * noise.fp_shared_frac))
    shared_boxes, shared_classes = _random_boxes(frame_rng, noise, n_shared)
    shared_base = _beta_scores(frame_rng, noise.score_fp_mean, noise.score_fp_concentration, n_shared)
    n_on = min(int(frame_rng.binomial(n_shared, noise.fp_distractor_frac)) if n_shared else 0, len(scene.distractor_boxes))
    if n_on:
        # each structure hosts at most one ghost
        pick = frame_rng.permutation(len(scene.distractor_boxes))[:n_on]
        shared_boxes[:n_on] = scene.distractor_boxes[pick]
        shared_classes[:n_on] = scene.distractor_classes[pick]

    rng = np.random.default_rng(np.random.SeedSequence(_seed_words(d.base_seed, noise.epoch_id, scene.frame_id, view_key, 1)))
    tp_boxes = _jitter(rng, gt_view, noise)
    tp_scores = _view_scores(rng, tp_base, noise.score_view_sigma)
    shared_boxes = _jitter(rng, transform_boxes(shared_boxes, view), noise)
    shared_scores = _view_scores(rng, shared_base, noise.score_view_sigma)

    n_view_fp = int(rng.poisson(noise.fp_rate * (1.0 - noise.fp_shared_frac)))
    fp_boxes, fp_classes = _random_boxes(rng, noise, n_view_fp)
    fp_scores = _beta_scores(rng, noise.score_fp_mean, noise.score_fp_concentration, n_view_fp)

    boxes = np.concatenate([tp_boxes[hit], fp_boxes, shared_boxes], axis=0)
    classes = np.concatenate([scene.gt_classes[hit], fp_classes, shared_classes])
    scores = np.concatenate([tp_scores[hit], fp_scores, shared_scores])
    boxes[:, 6] = normalize_yaw_array(boxes[:, 6])
    return boxes, classes.astype(np.int64), np.clip(scores, 0.0, 1.0)


def checkpoint_detectors(noise: NoiseModel, base_seed: int, epoch_ids: Sequence[int], spread: float = 0.15) -> list[DetectorHandle]:
    """One detector per temporal checkpoint.

    Epoch 0 is the current teacher and uses ``noise`` unchanged; other epochs get
    a deterministic multiplicative perturbation of the miss and localization
    parameters, modelling inter-epoch bias.
    """
    handles = []
    for ep in epoch_ids:
        if ep == 0:
            handles.append(DetectorHandle(replace(noise, epoch_id=0), base_seed))
            continue
        f = np.exp(spread * (2.0 * hash_uniform(base_seed, ep, np.arange(4), 0xEB0C) - 1.0))
        handles.append(
            DetectorHandle(
                replace(
                    noise,
                    epoch_id=int(ep),
                    fn_base=float(min(1.0, noise.fn_base * f[0])),
                    fn_distance_coeff=float(min(1.0, noise.fn_distance_coeff * f[1])),
                    loc_sigma=float(noise.loc_sigma * f[2]),
                    yaw_sigma=float(noise.yaw_sigma * f[3]),
                ),
                base_seed,
            )
        )
    return handles


# ---------------------------------------------------------------------------
# Serialisation: float32 point blobs + line-delimited JSON boxes

GT_FILE = "gt.jsonl"
DISTRACTOR_FILE = "distractors.jsonl"
POINTS_DIR = "points"


def box_record(frame_id: int, box: np.ndarray, cls: int, **extra) -> dict:
    rec = {"frame_id": int(frame_id)}
    rec.update({k: float(v) for k, v in zip(("cx", "cy", "cz", "l", "w", "h", "yaw"), box)})
    rec["class"] = ClassId(int(cls)).label
    rec.update(extra)
    return rec


def write_points(path: Path, points: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(points, dtype="<f4").reshape(-1, 4).tobytes())


def read_points(path: Path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(-1, 4).astype(np.float32)


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _read_jsonl_by_frame(path: Path) -> dict[int, list[dict]]:
    out: dict[int, list[dict]] = {}
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.setdefault(int(rec["frame_id"]), []).append(rec)
    return out


def _boxes_of(recs: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([[r[k] for k in ("cx", "cy", "cz", "l", "w", "h", "yaw")] for r in recs]).reshape(-1, 7)
    return boxes, np.array([int(ClassId.parse(r["class"])) for r in recs], dtype=np.int64)


def write_dataset(root: str | os.PathLike, scenes: Iterable[Scene]) -> None:
    root = Path(root)
    (root / POINTS_DIR).mkdir(parents=True, exist_ok=True)
    gt, distractors = [], []
    for sc in scenes:
        write_points(root / POINTS_DIR / f"{sc.frame_id:06d}.bin", sc.points)
        for box, cls, occ in zip(sc.gt_boxes, sc.gt_classes, sc.occluded):
            gt.append(box_record(sc.frame_id, box, cls, occluded=bool(occ)))
        distractors += [box_record(sc.frame_id, b, c) for b, c in zip(sc.distractor_boxes, sc.distractor_classes)]
    _write_jsonl(root / GT_FILE, gt)
    _write_jsonl(root / DISTRACTOR_FILE, distractors)


def read_dataset(root: str | os.PathLike) -> list[Scene]:
    root = Path(root)
    gt_path = root / GT_FILE
    if not gt_path.exists():
        raise FileNotFoundError(gt_path)
    by_frame = {int(p.stem): [] for p in sorted((root / POINTS_DIR).glob("*.bin"))}
    by_frame.update(_read_jsonl_by_frame(gt_path))
    d_path = root / DISTRACTOR_FILE
    distractors = _read_jsonl_by_frame(d_path) if d_path.exists() else {}
    scenes = []
    for fid in sorted(by_frame):
        recs = by_frame[fid]
        boxes, classes = _boxes_of(recs)
        occ = np.array([bool(r.get("occluded", False)) for r in recs], dtype=bool) if recs and "occluded" in recs[0] else None
        pts = read_points(root / POINTS_DIR / f"{fid:06d}.bin")
        d_boxes, d_classes = _boxes_of(distractors.get(fid, []))
        scenes.append(Scene(boxes, classes, pts, fid, occ, d_boxes, d_classes))
    return scenes
