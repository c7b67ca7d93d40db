"""Spatial-temporal ensembling of teacher detections into seed boxes."""

from __future__ import annotations

import json
import math
from concurrent.futures import Executor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .detsim import DetectorHandle, Scene, detect_arrays
from .geom3d import (
    ClassId,
    Detection,
    ViewTransform,
    arrays_to_detections,
    detections_to_arrays,
    transform_boxes,
)

DEFAULT_ROTATIONS = (0.0, math.radians(22.5), math.radians(-22.5))
DEFAULT_FLIPS = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class EnsembleConfig:
    rotations: tuple[float, ...] = DEFAULT_ROTATIONS
    flips: tuple[tuple[bool, bool], ...] = DEFAULT_FLIPS
    checkpoints: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        self.rotations = tuple(float(r) for r in self.rotations)
        self.flips = tuple((bool(a), bool(b)) for a, b in self.flips)
        self.checkpoints = tuple(int(c) for c in self.checkpoints)

    @property
    def num_views(self) -> int:
        return len(self.rotations) * len(self.flips)

    @property
    def expected_votes(self) -> int:
        """Seeds one object yields if every view of every checkpoint finds it."""
        return self.num_views * len(self.checkpoints)

    @classmethod
    def single_view(cls) -> "EnsembleConfig":
        return cls(rotations=(0.0,), flips=((False, False),))

    @classmethod
    def temporal(cls, n_checkpoints: int = 3) -> "EnsembleConfig":
        return cls(checkpoints=tuple(range(n_checkpoints)))

    def to_dict(self) -> dict:
        return {
            "rotations": list(self.rotations),
            "flips": [list(f) for f in self.flips],
            "checkpoints": list(self.checkpoints),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        return cls(
            rotations=tuple(d.get("rotations", DEFAULT_ROTATIONS)),
            flips=tuple(tuple(f) for f in d.get("flips", DEFAULT_FLIPS)),
            checkpoints=tuple(d.get("checkpoints", (0,))),
        )


class SeedBoxSet:
    """Seed boxes in the scene frame with their (view index, checkpoint id)."""

    def __init__(
        self,
        boxes: np.ndarray | None = None,
        classes: np.ndarray | None = None,
        scores: np.ndarray | None = None,
        views: np.ndarray | None = None,
        checkpoints: np.ndarray | None = None,
    ) -> None:
        self.boxes = np.zeros((0, 7)) if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        n = len(self.boxes)
        self.classes = np.zeros(n, np.int64) if classes is None else np.asarray(classes, dtype=np.int64).reshape(-1)
        self.scores = np.ones(n) if scores is None else np.asarray(scores, dtype=np.float64).reshape(-1)
        self.views = np.zeros(n, np.int64) if views is None else np.asarray(views, dtype=np.int64).reshape(-1)
        self.checkpoints = np.zeros(n, np.int64) if checkpoints is None else np.asarray(checkpoints, dtype=np.int64).reshape(-1)
        if not (len(self.classes) == len(self.scores) == len(self.views) == len(self.checkpoints) == n):
            raise ValueError("provenance length must equal detection count")

    @classmethod
    def from_detections(cls, detections: Sequence[Detection], provenance: Sequence[tuple[int, int]]) -> "SeedBoxSet":
        if len(detections) != len(provenance):
            raise ValueError("provenance length must equal detection count")
        boxes, classes, scores = detections_to_arrays(list(detections))
        prov = np.asarray(provenance, dtype=np.int64).reshape(-1, 2)
        return cls(boxes, classes, scores, prov[:, 0], prov[:, 1])

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def detections(self) -> list[Detection]:
        return arrays_to_detections(self.boxes, self.classes, self.scores)

    @property
    def provenance(self) -> list[tuple[int, int]]:
        return [(int(v), int(c)) for v, c in zip(self.views, self.checkpoints)]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.boxes, self.classes, self.scores


def generate_views(cfg: EnsembleConfig) -> list[ViewTransform]:
    """Flips (outer) x rotations (inner)."""
    if not cfg.rotations or not cfg.flips:
        raise ValueError("ensemble needs at least one rotation and one flip setting")
    return [ViewTransform(fx, fy, rot) for fx, fy in cfg.flips for rot in cfg.rotations]


def _detect_canonical(handle: DetectorHandle, scene: Scene, view: ViewTransform):
    boxes, classes, scores = detect_arrays(handle, scene, view)
    return transform_boxes(boxes, view.inverse()), classes, scores


def run_ste(
    scene: Scene,
    detectors: Sequence[DetectorHandle],
    cfg: EnsembleConfig,
    executor: Executor | None = None,
) -> SeedBoxSet:
    """Detect in every (checkpoint, view) and map all boxes back to the scene frame.

    No deduplication happens here; the result keeps every per-view box.
    """
    if not detectors:
        raise ValueError("run_ste needs at least one detector")
    epochs = tuple(d.noise.epoch_id for d in detectors)
    if epochs != cfg.checkpoints:
        raise ValueError(f"detector epochs {epochs} do not match configured checkpoints {cfg.checkpoints}")
    views = generate_views(cfg)
    jobs = [(d, v_idx, v) for d in detectors for v_idx, v in enumerate(views)]
    if executor is None:
        results = [_detect_canonical(d, scene, v) for d, _, v in jobs]
    else:
        futures = [executor.submit(_detect_canonical, d, scene, v) for d, _, v in jobs]
        results = [f.result() for f in futures]

    return SeedBoxSet(
        np.concatenate([r[0] for r in results], axis=0),
        np.concatenate([r[1] for r in results]),
        np.concatenate([r[2] for r in results]),
        np.concatenate([np.full(len(r[0]), v_idx) for (_, v_idx, _), r in zip(jobs, results)]),
        np.concatenate([np.full(len(r[0]), d.noise.epoch_id) for (d, _, _), r in zip(jobs, results)]),
    )


def write_seed_dump(path: str | Path, frames: Sequence[tuple[int, SeedBoxSet]]) -> None:
    """One JSON object per seed box, tagged with frame, view and checkpoint."""
    lines = []
    for frame_id, seeds in frames:
        for det, (v_idx, ckpt) in zip(seeds.detections, seeds.provenance):
            b = det.box
            lines.append(
                json.dumps(
                    {
                        "frame_id": int(frame_id),
                        "cx": b.cx, "cy": b.cy, "cz": b.cz,
                        "l": b.l, "w": b.w, "h": b.h, "yaw": b.yaw,
                        "class": det.class_id.label,
                        "score": det.score,
                        "view": v_idx,
                        "checkpoint": ckpt,
                    },
                    sort_keys=True,
                )
            )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_seed_dump(path: str | Path) -> dict[int, SeedBoxSet]:
    rows: dict[int, list[dict]] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            rows.setdefault(int(r["frame_id"]), []).append(r)
    out = {}
    for fid, recs in rows.items():
        boxes = np.array([[r[k] for k in ("cx", "cy", "cz", "l", "w", "h", "yaw")] for r in recs])
        classes = np.array([int(ClassId.parse(r["class"])) for r in recs])
        out[fid] = SeedBoxSet(
            boxes,
            classes,
            np.array([r["score"] for r in recs]),
            np.array([r["view"] for r in recs]),
            np.array([r["checkpoint"] for r in recs]),
        )
    return out
