"""Clustering-based box voting over STE seed boxes.

Pipeline: cluster seeds by BEV IoU around score-ranked anchors, describe each
seed with a fixed-length RoI feature, let a small vote network predict a
refined box plus an objectness for every seed, then fuse each cluster with
objectness weights and finish with NMS.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tinynet
from .detsim import DetectorHandle, Scene
from .ensemble import EnsembleConfig, SeedBoxSet, run_ste
from .geom3d import (
    Box3D,
    ClassId,
    Detection,
    arrays_to_detections,
    iou_3d_matrix,
    iou_one_to_many,
    nms_indices,
    normalize_yaw_array,
    score_order,
)

FEATURE_DIM = 32
RESIDUAL_DIM = 7
ROI_ENLARGE = 1.2
NEG_SCORE = 0.1
NEG_IOU = 0.3


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Cluster:
    members: list[Detection]
    anchor_index: int = 0
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class RoIFeature:
    feature: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.feature)):
            raise ValueError("RoI feature has non-finite entries")


@dataclass(frozen=True)
class Vote:
    refined_box: Box3D
    objectness: float


# ---------------------------------------------------------------------------
# Seed clustering


def cluster_indices(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> list[np.ndarray]:
    """Greedy anchor clustering; each entry lists seed indices, anchor first.

    Clusters come out in descending anchor score (ties: lower index first);
    members within a cluster are in descending score.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    found: list[np.ndarray] = []
    for cls in np.unique(classes):
        idx = np.nonzero(classes == cls)[0]
        idx = idx[score_order(scores[idx])]
        sub = boxes[idx]
        free = np.ones(len(idx), dtype=bool)
        for k in range(len(idx)):
            if not free[k]:
                continue
            free[k] = False
            rest = k + 1 + np.nonzero(free[k + 1 :])[0]
            members = [k]
            if len(rest):
                absorbed = rest[iou_one_to_many(sub[k], sub[rest], "bev") > iou_threshold]
                free[absorbed] = False
                members.extend(absorbed.tolist())
            found.append(idx[np.array(members, dtype=np.int64)])
    anchors = np.array([c[0] for c in found], dtype=np.int64)
    if len(anchors) == 0:
        return []
    order = np.lexsort((anchors, -scores[anchors]))
    return [found[i] for i in order]


def cluster_seed_boxes(seeds: SeedBoxSet, iou_threshold: float = 0.5) -> list[Cluster]:
    boxes, classes, scores = seeds.arrays()
    out = []
    for idx in cluster_indices(boxes, classes, scores, iou_threshold):
        out.append(Cluster(arrays_to_detections(boxes[idx], classes[idx], scores[idx]), 0, idx))
    return out


# ---------------------------------------------------------------------------
# Geometric RoI featurizer


def _local_coords(box: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    c, s = math.cos(box[6]), math.sin(box[6])
    dx = xyz[:, 0] - box[0]
    dy = xyz[:, 1] - box[1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy, xyz[:, 2] - box[2]], axis=1)


def _feature_from_points(box: np.ndarray, cls: int, score: float, xyz: np.ndarray) -> np.ndarray:
    """Feature vector from the (already selected) points inside the enlarged box."""
    f = np.zeros(FEATURE_DIM)
    n = len(xyz)
    dims = box[3:6]
    f[0] = math.log1p(n)
    if n:
        local = _local_coords(box, xyz)
        f[1:4] = local.mean(axis=0)
        f[4:7] = xyz.mean(axis=0) - box[:3]
        f[10] = xyz[:, 2].mean()
        f[24] = np.mean(np.all(np.abs(local) <= dims / 2.0, axis=1))
        if n > 1:
            f[7:10] = (local.max(axis=0) - local.min(axis=0)) / dims
            f[16:19] = local.std(axis=0) / dims
    f[11] = score
    f[12] = math.hypot(box[0], box[1]) / 100.0
    f[13 + int(cls)] = 1.0
    f[19:22] = np.log(dims)
    f[22] = math.cos(box[6])
    f[23] = math.sin(box[6])
    return f


def _in_enlarged(box: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    local = _local_coords(box, xyz)
    return np.all(np.abs(local) <= box[3:6] * ROI_ENLARGE / 2.0, axis=1)


class PointIndex:
    """Points sorted by x for fast per-box candidate lookup."""

    def __init__(self, points: np.ndarray) -> None:
        xyz = np.asarray(points, dtype=np.float64)[:, :3]
        self.order = np.argsort(xyz[:, 0], kind="stable")
        self.xyz = xyz
        self.sorted_x = xyz[self.order, 0]

    def inside(self, box: np.ndarray) -> np.ndarray:
        """Original indices (ascending) of points inside the enlarged box."""
        r = math.hypot(box[3], box[4]) * ROI_ENLARGE / 2.0
        lo = np.searchsorted(self.sorted_x, box[0] - r, side="left")
        hi = np.searchsorted(self.sorted_x, box[0] + r, side="right")
        cand = self.order[lo:hi]
        cand = cand[np.abs(self.xyz[cand, 1] - box[1]) <= r]
        return np.sort(cand[_in_enlarged(box, self.xyz[cand])])


def roi_features(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray, scene: Scene, index: PointIndex | None = None) -> np.ndarray:
    """``(N, FEATURE_DIM)`` features for many boxes of one scene."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    index = index or PointIndex(scene.points)
    out = np.zeros((len(boxes), FEATURE_DIM))
    for i, (b, c, s) in enumerate(zip(boxes, classes, scores)):
        out[i] = _feature_from_points(b, int(c), float(s), index.xyz[index.inside(b)])
    return out


def extract_roi_feature(det: Detection, scene: Scene) -> RoIFeature:
    b = det.box.as_array()
    return RoIFeature(roi_features(b[None], [int(det.class_id)], [det.score], scene)[0])


def naive_inside_indices(box: Box3D, scene: Scene) -> list[int]:
    """Reference point-in-rotated-box scan, one point at a time."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw, hh = box.l * ROI_ENLARGE / 2, box.w * ROI_ENLARGE / 2, box.h * ROI_ENLARGE / 2
    hits = []
    for i, (x, y, z, _) in enumerate(scene.points.astype(np.float64)):
        dx, dy = x - box.cx, y - box.cy
        if abs(c * dx + s * dy) <= hl and abs(-s * dx + c * dy) <= hw and abs(z - box.cz) <= hh:
            hits.append(i)
    return hits


# ---------------------------------------------------------------------------
# Vote network


def box_residuals(boxes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Residuals taking ``boxes`` onto ``targets``: centre offsets, log size ratios, yaw delta."""
    r = np.empty((len(boxes), RESIDUAL_DIM))
    r[:, :3] = targets[:, :3] - boxes[:, :3]
    r[:, 3:6] = np.log(targets[:, 3:6] / boxes[:, 3:6])
    r[:, 6] = normalize_yaw_array(targets[:, 6] - boxes[:, 6])
    return r


def apply_residuals(boxes: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    out = np.empty_like(boxes)
    out[:, :3] = boxes[:, :3] + residuals[:, :3]
    out[:, 3:6] = boxes[:, 3:6] * np.exp(residuals[:, 3:6])
    out[:, 6] = normalize_yaw_array(boxes[:, 6] + residuals[:, 6])
    return out


@dataclass
class VoteNet:
    reg: tinynet.Mlp2
    obj: tinynet.Mlp2
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feat_std: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))
    res_scale: np.ndarray = field(default_factory=lambda: np.ones(RESIDUAL_DIM))
    hyper: dict = field(default_factory=dict)

    @classmethod
    def init(cls, hidden: int = 64, seed: int = 0) -> "VoteNet":
        rng = np.random.default_rng(seed)
        reg = tinynet.Mlp2.init(FEATURE_DIM, hidden, RESIDUAL_DIM, rng)
        # zero output layer: an untrained regressor votes the seed box unchanged
        reg.W2[:] = 0.0
        reg.b2[:] = 0.0
        return cls(reg, tinynet.Mlp2.init(FEATURE_DIM, hidden, 1, rng))

    @classmethod
    def zeros(cls, hidden: int = 64) -> "VoteNet":
        return cls(tinynet.Mlp2.zeros(FEATURE_DIM, hidden, RESIDUAL_DIM), tinynet.Mlp2.zeros(FEATURE_DIM, hidden, 1))

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.feat_mean) / self.feat_std

    def predict(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(residuals (N, 7), objectness logits (N,))`` for raw features."""
        x = self.normalize(np.atleast_2d(features))
        res, _ = tinynet.forward(self.reg, x)
        logit, _ = tinynet.forward(self.obj, x)
        res = res * self.res_scale
        if not (np.all(np.isfinite(res)) and np.all(np.isfinite(logit))):
            raise FloatingPointError("vote network produced non-finite output")
        return res, logit[:, 0]

    def copy(self) -> "VoteNet":
        return VoteNet(self.reg.copy(), self.obj.copy(), self.feat_mean.copy(), self.feat_std.copy(), self.res_scale.copy(), dict(self.hyper))


def objectness_from_logit(logit: np.ndarray) -> np.ndarray:
    # clipping keeps the sigmoid strictly inside (0, 1) in float64
    return tinynet.sigmoid(np.clip(logit, -30.0, 30.0))


def vote(net: VoteNet, feat: RoIFeature, det: Detection) -> Vote:
    res, logit = net.predict(feat.feature[None])
    box = apply_residuals(det.box.as_array()[None], res)[0]
    return Vote(Box3D.from_array(box), float(objectness_from_logit(logit)[0]))


def save_vote_net(net: VoteNet, path: str | Path) -> None:
    arrays = {}
    for head in ("reg", "obj"):
        for k, v in getattr(net, head).params().items():
            arrays[f"{head}.{k}"] = v
    arrays["feat_mean"] = net.feat_mean
    arrays["feat_std"] = net.feat_std
    arrays["res_scale"] = net.res_scale
    header = {
        "kind": "votenet",
        "dims": {"features": FEATURE_DIM, "hidden": int(net.reg.W1.shape[1]), "residuals": RESIDUAL_DIM},
        "activation": net.reg.activation,
        "hyper": net.hyper,
    }
    tinynet.write_blob(path, header, arrays)


def load_vote_net(path: str | Path) -> VoteNet:
    header, arrays = tinynet.read_blob(path)
    if header.get("kind") != "votenet":
        raise ValueError(f"{path}: not a vote-net checkpoint")
    heads = {}
    for head in ("reg", "obj"):
        heads[head] = tinynet.Mlp2(*(arrays[f"{head}.{k}"] for k in tinynet.Mlp2.PARAMS), activation=header.get("activation", "relu"))
    return VoteNet(heads["reg"], heads["obj"], arrays["feat_mean"], arrays["feat_std"], arrays["res_scale"], header.get("hyper", {}))


def _round_float32(net: VoteNet) -> VoteNet:
    """Snap weights to the float32 grid so saved and in-memory nets agree exactly."""
    out = net.copy()
    for head in (out.reg, out.obj):
        for k in tinynet.Mlp2.PARAMS:
            setattr(head, k, getattr(head, k).astype(np.float32).astype(np.float64))
    out.feat_mean = out.feat_mean.astype(np.float32).astype(np.float64)
    out.feat_std = out.feat_std.astype(np.float32).astype(np.float64)
    out.res_scale = out.res_scale.astype(np.float32).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# Training data and training


@dataclass
class TrainingSet:
    features: np.ndarray  # (N, FEATURE_DIM)
    residuals: np.ndarray  # (N, 7), meaningful where positive
    labels: np.ndarray  # (N,) 1 = positive
    frames: np.ndarray  # (N,) frame id per seed

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask: np.ndarray) -> "TrainingSet":
        return TrainingSet(self.features[mask], self.residuals[mask], self.labels[mask], self.frames[mask])

    @classmethod
    def concat(cls, parts: Sequence["TrainingSet"]) -> "TrainingSet":
        return cls(
            np.concatenate([p.features for p in parts]).reshape(-1, FEATURE_DIM),
            np.concatenate([p.residuals for p in parts]).reshape(-1, RESIDUAL_DIM),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.frames for p in parts]),
        )


def label_members(scores: np.ndarray, gt_iou: np.ndarray, score_min: float = NEG_SCORE, iou_min: float = NEG_IOU) -> np.ndarray:
    """1 for positives; seeds scoring below ``score_min`` or overlapping gt below ``iou_min`` are negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    gt_iou = np.asarray(gt_iou, dtype=np.float64)
    return ((scores >= score_min) & (gt_iou >= iou_min)).astype(np.float64)


def best_gt_match(boxes: np.ndarray, classes: np.ndarray, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """3D IoU with, and index of, the best same-class gt box for each seed (-1 if none)."""
    iou = iou_3d_matrix(boxes, scene.gt_boxes)
    iou = np.where(np.asarray(classes)[:, None] == scene.gt_classes[None, :], iou, 0.0)
    if iou.shape[1] == 0:
        return np.zeros(len(boxes)), np.full(len(boxes), -1)
    j = np.argmax(iou, axis=1)
    best = iou[np.arange(len(boxes)), j]
    return best, np.where(best > 0.0, j, -1)


def training_set_from_seeds(seeds: SeedBoxSet, scene: Scene) -> TrainingSet:
    boxes, classes, scores = seeds.arrays()
    feats = roi_features(boxes, classes, scores, scene)
    best, j = best_gt_match(boxes, classes, scene)
    labels = label_members(scores, best)
    res = np.zeros((len(boxes), RESIDUAL_DIM))
    pos = labels == 1.0
    if pos.any():
        res[pos] = box_residuals(boxes[pos], scene.gt_boxes[j[pos]])
    return TrainingSet(feats, res, labels, np.full(len(boxes), scene.frame_id))


def build_training_set(scenes: Sequence[Scene], detectors: Sequence[DetectorHandle], cfg: EnsembleConfig) -> TrainingSet:
    """Labelled seeds from scenes with ground truth."""
    parts = [training_set_from_seeds(run_ste(sc, detectors, cfg), sc) for sc in scenes]
    if not parts:
        raise ValueError("no scenes to build a training set from")
    return TrainingSet.concat(parts)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden: int = 64
    alpha_f: float = 0.25
    gamma: float = 2.0
    beta: float = 1.0
    reg_weight: float = 1.0
    # divide residual targets by their spread; off keeps the loss in metres / log-ratios / radians
    whiten_targets: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def vote_net_loss(net: VoteNet, data: TrainingSet, hyper: TrainConfig, with_grads: bool = True):
    """Mean focal objectness loss plus positives-only smooth-l1 on scaled residuals.

    Returns ``(loss, grads)`` where ``grads`` maps ``"reg"``/``"obj"`` to
    parameter-gradient dicts (``None`` when ``with_grads`` is false).
    """
    x = net.normalize(data.features)
    n = len(x)
    if n == 0:
        raise ValueError("empty batch")
    logit, obj_cache = tinynet.forward(net.obj, x)
    f_loss, f_grad = tinynet.focal_loss(logit[:, 0], data.labels, hyper.alpha_f, hyper.gamma)
    loss = f_loss.mean()
    pos = data.labels == 1.0
    n_pos = int(pos.sum())
    out, reg_cache = tinynet.forward(net.reg, x)
    d_out = np.zeros_like(out)
    if n_pos:
        target = data.residuals / net.res_scale
        r_loss, r_grad = tinynet.smooth_l1(out[pos], target[pos], hyper.beta)
        loss += hyper.reg_weight * r_loss.sum() / n_pos
        d_out[pos] = hyper.reg_weight * r_grad / n_pos
    if not with_grads:
        return float(loss), None
    g_obj, _ = tinynet.backward(net.obj, obj_cache, (f_grad / n)[:, None])
    g_reg, _ = tinynet.backward(net.reg, reg_cache, d_out)
    return float(loss), {"reg": g_reg, "obj": g_obj}


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    heldout_loss: list[float] = field(default_factory=list)  # index 0 = before training

    @property
    def heldout_reduction(self) -> float:
        return 1.0 - self.heldout_loss[-1] / self.heldout_loss[0]


def train_vote_net(train: TrainingSet, hyper: TrainConfig = TrainConfig(), heldout: TrainingSet | None = None) -> tuple[VoteNet, TrainHistory]:
    """Minibatch SGD with momentum; deterministic for a fixed ``hyper.seed``."""
    if len(train) == 0:
        raise ValueError("empty training set")
    net = VoteNet.init(hyper.hidden, hyper.seed)
    net.feat_mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    net.feat_std = np.where(std > 1e-6, std, 1.0)
    pos = train.labels == 1.0
    if hyper.whiten_targets and pos.any():
        net.res_scale = np.maximum(np.abs(train.residuals[pos]).std(axis=0), 1e-3)
    net.hyper = hyper.to_dict()
    heldout = heldout if heldout is not None else train

    hist = TrainHistory()
    hist.heldout_loss.append(vote_net_loss(net, heldout, hyper, with_grads=False)[0])
    opt = tinynet.Sgd(hyper.lr, hyper.momentum, hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed + 1)
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = train.subset(order[start : start + hyper.batch_size])
            loss, grads = vote_net_loss(net, batch, hyper)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.step(net.reg, grads["reg"])
            opt.step(net.obj, grads["obj"])
            total += loss * len(batch)
        hist.train_loss.append(total / len(train))
        held = vote_net_loss(net, heldout, hyper, with_grads=False)[0]
        if not math.isfinite(held):
            raise TrainingDivergedError(f"non-finite held-out loss after epoch {epoch}")
        hist.heldout_loss.append(held)
    return _round_float32(net), hist


# ---------------------------------------------------------------------------
# Aggregation and the full CBV pass


def aggregate_votes(boxes: np.ndarray, objectness: np.ndarray) -> np.ndarray:
    """Objectness-weighted mean box; yaw via weighted circular mean."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    w = np.asarray(objectness, dtype=np.float64)
    if len(boxes) == 1:
        return boxes[0].copy()
    if np.any(w <= 0):
        raise ValueError("objectness weights must be strictly positive")
    out = np.empty(7)
    out[:6] = (w[:, None] * boxes[:, :6]).sum(axis=0) / w.sum()
    out[6] = math.atan2(float(np.sum(w * np.sin(boxes[:, 6]))), float(np.sum(w * np.cos(boxes[:, 6]))))
    return out


def cluster_score(objectness: np.ndarray, n_expected: int) -> float:
    """Mean objectness damped by how often the cluster was detected."""
    return float(np.mean(objectness) * min(1.0, len(objectness) / n_expected))


def aggregate_cluster(cluster: Cluster, votes: Sequence[Vote], n_expected: int = 12) -> Detection:
    if len(votes) != len(cluster) or not votes:
        raise ValueError("need exactly one vote per cluster member")
    boxes = np.array([v.refined_box.as_array() for v in votes])
    s = np.array([v.objectness for v in votes])
    box = aggregate_votes(boxes, s)
    return Detection(Box3D.from_array(box), cluster.members[cluster.anchor_index].class_id, cluster_score(s, n_expected))


Featurizer = Callable[[np.ndarray, np.ndarray, np.ndarray, Scene], np.ndarray]


@dataclass
class CbvResult:
    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.boxes, self.classes, self.scores

    @property
    def detections(self) -> list[Detection]:
        return arrays_to_detections(self.boxes, self.classes, self.scores)


def run_cbv_arrays(
    seeds: SeedBoxSet,
    scene: Scene,
    net: VoteNet,
    nms_iou: float = 0.3,
    cluster_iou: float = 0.5,
    n_expected: int = 12,
    nms_mode: str = "bev",
    featurizer: Featurizer = roi_features,
) -> CbvResult:
    boxes, classes, scores = seeds.arrays()
    if len(boxes) == 0:
        return CbvResult(np.zeros((0, 7)), np.zeros(0, np.int64), np.zeros(0))
    feats = featurizer(boxes, classes, scores, scene)
    res, logit = net.predict(feats)
    voted = apply_residuals(boxes, res)
    obj = objectness_from_logit(logit)
    clusters = cluster_indices(boxes, classes, scores, cluster_iou)
    out_boxes = np.array([aggregate_votes(voted[idx], obj[idx]) for idx in clusters])
    out_boxes[:, 6] = normalize_yaw_array(out_boxes[:, 6])
    out_classes = np.array([classes[idx[0]] for idx in clusters], dtype=np.int64)
    out_scores = np.array([cluster_score(obj[idx], n_expected) for idx in clusters])
    keep = nms_indices(out_boxes, out_classes, out_scores, nms_iou, nms_mode)
    return CbvResult(out_boxes[keep], out_classes[keep], out_scores[keep])


def run_cbv(seeds: SeedBoxSet, scene: Scene, net: VoteNet, nms_iou: float = 0.3, **kw) -> list[Detection]:
    """Cluster, featurize, vote, aggregate and NMS; final pseudo labels."""
    return run_cbv_arrays(seeds, scene, net, nms_iou, **kw).detections
