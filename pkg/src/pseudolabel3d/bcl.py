"""Box-wise contrastive learning: BEV box features, cross-view pairing, InfoNCE.

Embeddings are arranged interleaved: row ``2k`` comes from view 1 and row
``2k + 1`` is its matched box in view 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tinynet
from .geom3d import Box3D, Detection

MATCH_DISTANCE = 2.0
TAU = 0.1
ALPHA = 0.05
EMBED_DIM = 64
N_SAMPLE_POINTS = 5


@dataclass
class BevFeatureMap:
    grid: np.ndarray  # (H, W, C), grid[iy, ix]
    origin: tuple[float, float] = (0.0, 0.0)  # world xy of the centre of cell (0, 0)
    cell_size: float = 1.0

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or min(self.grid.shape) < 1:
            raise ValueError(f"feature grid must be H x W x C with all sizes >= 1, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("feature grid has non-finite entries")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def channels(self) -> int:
        return self.grid.shape[2]

    def sample(self, x, y) -> np.ndarray:
        """Bilinear samples at world coordinates; ``(..., C)``. Outside queries clamp to the border."""
        h, w, _ = self.grid.shape
        fx = np.clip((np.asarray(x, dtype=np.float64) - self.origin[0]) / self.cell_size, 0.0, w - 1)
        fy = np.clip((np.asarray(y, dtype=np.float64) - self.origin[1]) / self.cell_size, 0.0, h - 1)
        x0 = np.floor(fx).astype(np.int64)
        y0 = np.floor(fy).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        tx = (fx - x0)[..., None]
        ty = (fy - y0)[..., None]
        g = self.grid
        top = g[y0, x0] * (1.0 - tx) + g[y0, x1] * tx
        bottom = g[y1, x0] * (1.0 - tx) + g[y1, x1] * tx
        return top * (1.0 - ty) + bottom * ty


def bilinear_interp(fmap: BevFeatureMap, x: float, y: float) -> np.ndarray:
    return fmap.sample(x, y)


def box_sample_points(box: Box3D) -> np.ndarray:
    """``(5, 2)`` BEV points: centre, front, back, left and right side midpoints."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.l / 2.0, box.w / 2.0
    return np.array(
        [
            [box.cx, box.cy],
            [box.cx + hl * c, box.cy + hl * s],
            [box.cx - hl * c, box.cy - hl * s],
            [box.cx - hw * s, box.cy + hw * c],
            [box.cx + hw * s, box.cy - hw * c],
        ]
    )


def box_feature(fmap: BevFeatureMap, box: Box3D) -> np.ndarray:
    """Concatenated samples at the five BEV points, length ``5 * C``."""
    p = box_sample_points(box)
    return fmap.sample(p[:, 0], p[:, 1]).reshape(-1)


def box_features(fmap: BevFeatureMap, boxes: Sequence[Box3D]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, N_SAMPLE_POINTS * fmap.channels))
    return np.stack([box_feature(fmap, b) for b in boxes])


def synthetic_bev_map(
    boxes: Sequence[Box3D],
    extent: float = 100.0,
    cell_size: float = 0.5,
    channels: int = 8,
    seed: int = 0,
) -> BevFeatureMap:
    """Anisotropic Gaussian bumps at box footprints; a stand-in for a backbone's BEV output."""
    rng = np.random.default_rng(seed)
    n = int(round(extent / cell_size))
    origin = (-extent / 2.0 + cell_size / 2.0,) * 2
    xs = origin[0] + cell_size * np.arange(n)
    gx, gy = np.meshgrid(xs, xs)
    grid = np.zeros((n, n, channels))
    for b in boxes:
        amp = rng.uniform(0.2, 1.0, channels)
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        dx, dy = gx - b.cx, gy - b.cy
        u = (c * dx + s * dy) / (b.l / 2.0)
        v = (-s * dx + c * dy) / (b.w / 2.0)
        # the second half of the channels is asymmetric along the heading
        bump = np.exp(-0.5 * (u * u + v * v))
        grid[..., : channels // 2] += bump[..., None] * amp[: channels // 2]
        grid[..., channels // 2 :] += (bump * (1.0 + np.tanh(u)))[..., None] * amp[channels // 2 :]
    return BevFeatureMap(grid, origin, cell_size)


def save_feature_map(fmap: BevFeatureMap, path: str | Path) -> None:
    tinynet.write_blob(path, {"kind": "bevmap", "origin": list(fmap.origin), "cell_size": fmap.cell_size}, {"grid": fmap.grid})


def load_feature_map(path: str | Path) -> BevFeatureMap:
    header, arrays = tinynet.read_blob(path)
    if header.get("kind") != "bevmap":
        raise ValueError(f"{path}: not a feature-map blob")
    return BevFeatureMap(arrays["grid"], tuple(header["origin"]), header["cell_size"])


# ---------------------------------------------------------------------------
# Cross-view pairing


@dataclass
class PairSet:
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def arrange(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        """``(2M, D)`` rows alternating view 1, view 2 per pair."""
        z1 = np.asarray(z1, dtype=np.float64)
        z2 = np.asarray(z2, dtype=np.float64)
        if not self.pairs:
            return np.zeros((0, z1.shape[1] if z1.ndim == 2 else 0))
        i = np.array([p[0] for p in self.pairs])
        j = np.array([p[1] for p in self.pairs])
        out = np.empty((2 * len(i), z1.shape[1]))
        out[0::2] = z1[i]
        out[1::2] = z2[j]
        return out


def greedy_match(dets1: Sequence[Detection], dets2: Sequence[Detection], max_dist: float = MATCH_DISTANCE) -> PairSet:
    """Pair the globally closest same-class boxes first, while centre distance < ``max_dist``.

    Both lists must already be in one frame. Equal distances resolve by
    lower view-1 index, then lower view-2 index.
    """
    if not dets1 or not dets2:
        return PairSet()
    c1 = np.array([[d.box.cx, d.box.cy, d.box.cz] for d in dets1])
    c2 = np.array([[d.box.cx, d.box.cy, d.box.cz] for d in dets2])
    k1 = np.array([int(d.class_id) for d in dets1])
    k2 = np.array([int(d.class_id) for d in dets2])
    dist = np.linalg.norm(c1[:, None, :] - c2[None, :, :], axis=2)
    ok = (k1[:, None] == k2[None, :]) & (dist < max_dist)
    ii, jj = np.nonzero(ok)
    order = np.lexsort((jj, ii, dist[ii, jj]))
    used1 = np.zeros(len(dets1), dtype=bool)
    used2 = np.zeros(len(dets2), dtype=bool)
    pairs = []
    for t in order:
        i, j = ii[t], jj[t]
        if not used1[i] and not used2[j]:
            used1[i] = used2[j] = True
            pairs.append((int(i), int(j)))
    return PairSet(pairs)


def arrange_pairs(pairs: PairSet, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    return pairs.arrange(z1, z2)


# ---------------------------------------------------------------------------
# InfoNCE


def _partners(n: int) -> np.ndarray:
    idx = np.arange(n)
    return idx ^ 1  # 0<->1, 2<->3, ...


def info_nce(z: np.ndarray, tau: float = TAU, variant: str = "literal", check_normalized: bool = True) -> tuple[float, np.ndarray]:
    """Mean over all 2M anchors of ``-log(exp(s_pq) / sum_k exp(s_pk))``, ``s = z z^T / tau``.

    ``variant="literal"`` sums the denominator over ``k != q`` (so the
    anchor's self-similarity is included); ``"simclr"`` sums over ``k != p``.
    Returns ``(loss, dloss/dz)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0 or len(z) % 2:
        raise ValueError(f"need 2M >= 2 interleaved embeddings, got shape {z.shape}")
    if variant not in ("literal", "simclr"):
        raise ValueError(f"unknown InfoNCE variant {variant!r}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if check_normalized:
        norms = np.linalg.norm(z, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("embeddings must be L2-normalised")
    n = len(z)
    q = _partners(n)
    rows = np.arange(n)
    s = z @ z.T / tau
    mask = np.ones((n, n), dtype=bool)
    if variant == "literal":
        mask[rows, q] = False
    else:
        mask[rows, rows] = False
    masked = np.where(mask, s, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(denom))[:, 0]
    loss = float(np.mean(lse - s[rows, q]))
    g = e / denom
    g[rows, q] -= 1.0
    g /= n
    dz = (g + g.T) @ z / tau
    return loss, dz


# ---------------------------------------------------------------------------
# Projection head: Mlp2 then L2 normalisation


@dataclass
class ProjectionHead:
    mlp: tinynet.Mlp2

    @classmethod
    def init(cls, n_in: int, hidden: int = 128, n_out: int = EMBED_DIM, seed: int = 0) -> "ProjectionHead":
        return cls(tinynet.Mlp2.init(n_in, hidden, n_out, seed))


def projection_forward(head: ProjectionHead, raw: np.ndarray) -> tuple[np.ndarray, tuple]:
    y, cache = tinynet.forward(head.mlp, np.atleast_2d(raw))
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    if not np.all(np.isfinite(y)) or np.any(norm == 0):
        raise FloatingPointError("projection output is non-finite or zero")
    z = y / norm
    return z, (cache, z, norm)


def projection_backward(head: ProjectionHead, cache: tuple, dz: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    mlp_cache, z, norm = cache
    dy = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norm
    return tinynet.backward(head.mlp, mlp_cache, dy)


def projection_head(head: ProjectionHead, raw: np.ndarray) -> np.ndarray:
    z, _ = projection_forward(head, raw)
    return z[0] if np.ndim(raw) == 1 else z


@dataclass
class BoxEmbedding:
    raw: np.ndarray
    projected: np.ndarray


def embed_boxes(fmap: BevFeatureMap, boxes: Sequence[Box3D], head: ProjectionHead) -> list[BoxEmbedding]:
    h = box_features(fmap, boxes)
    if len(h) == 0:
        return []
    z = projection_head(head, h)
    return [BoxEmbedding(a, b) for a, b in zip(h, z)]


def contrastive_loss(head: ProjectionHead, h: np.ndarray, tau: float = TAU, variant: str = "literal") -> tuple[float, dict[str, np.ndarray]]:
    """InfoNCE of projected interleaved raw features and its gradient w.r.t. the head."""
    z, cache = projection_forward(head, h)
    loss, dz = info_nce(z, tau, variant, check_normalized=False)
    grads, _ = projection_backward(head, cache, dz)
    return loss, grads


def box_contrastive_loss(
    head: ProjectionHead,
    map1: BevFeatureMap,
    map2: BevFeatureMap,
    dets1: Sequence[Detection],
    dets2: Sequence[Detection],
    tau: float = TAU,
    variant: str = "literal",
) -> tuple[float, dict[str, np.ndarray], PairSet]:
    """Match, featurise both views, project and score; zero loss when nothing pairs."""
    pairs = greedy_match(dets1, dets2)
    if not len(pairs):
        return 0.0, {k: np.zeros_like(v) for k, v in head.mlp.params().items()}, pairs
    h1 = box_features(map1, [d.box for d in dets1])
    h2 = box_features(map2, [d.box for d in dets2])
    loss, grads = contrastive_loss(head, pairs.arrange(h1, h2), tau, variant)
    return loss, grads, pairs


# ---------------------------------------------------------------------------
# Loss composition


def unlabeled_detection_loss(cls_1: float, reg_1: float, cls_2: float, reg_2: float) -> float:
    """Mean over the two augmented views of classification plus box loss."""
    return 0.5 * (cls_1 + reg_1 + cls_2 + reg_2)


def combined_unlabeled_loss(labeled_det: float, unlabeled_det: float, con_loss: float, alpha: float = ALPHA) -> float:
    vals = (labeled_det, unlabeled_det, con_loss, alpha)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("loss terms must be finite")
    return labeled_det + unlabeled_det + alpha * con_loss
