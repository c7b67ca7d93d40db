"""Experiment runner: datasets on disk, vote-net training, pipeline variants, metric files.

Directory layout under ``out``::

    data/eval/      unlabelled evaluation scenes (points + gt for scoring)
    data/labeled/   labelled scenes for vote-net training and held-out checks
    votenet.bin     vote-net checkpoint
    training_curve.csv, votenet_eval.json
    metrics.csv, sweep.csv, manifest.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cbv
from .detsim import (
    DetectorHandle,
    NoiseModel,
    Scene,
    SceneConfig,
    checkpoint_detectors,
    detect_arrays,
    generate_scenes,
    hash_uniform,
    read_dataset,
    write_dataset,
)
from .ensemble import EnsembleConfig, run_ste
from .evaluation import (
    ClassThresholds,
    class_counts,
    filter_by_score,
    match_frame,
    threshold_sweep,
    to_csv,
)
from .geom3d import ClassId, ViewTransform, nms_indices

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "ste", "ste-thresh", "ste-cbv")
DEFAULT_THRESHOLDS = {"baseline": 0.1, "ste": 0.1, "ste-thresh": 0.3, "ste-cbv": 0.1}
SWEEP_GRID = tuple(round(0.05 * i, 2) for i in range(21))


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


def derive_seed(master: int, label: str) -> int:
    """Child seed in the single generator hierarchy rooted at ``master``."""
    tag = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")
    return int(hash_uniform(master, tag)[()] * 2**53)


@dataclass
class ExperimentConfig:
    n_scenes: int = 500
    seed: int = 0
    train_scenes: int = 150
    heldout_scenes: int = 50
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    train: cbv.TrainConfig = field(default_factory=cbv.TrainConfig)
    thresholds: ClassThresholds = field(default_factory=ClassThresholds)
    variant: str = "all"
    threshold: float | None = None  # overrides the score cut of the chosen variant
    nms_iou: float = 0.3
    nms_mode: str = "bev"
    cluster_iou: float = 0.5
    workers: int = 1
    out: str = "runs/default"

    def validate(self) -> None:
        if self.n_scenes < 1 or self.train_scenes < 1 or self.heldout_scenes < 1:
            raise ConfigError("scene counts must be positive")
        if self.variant not in VARIANTS + ("all",):
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)} or all")
        if self.threshold is not None and not 0.0 <= self.threshold < 1.0:
            raise ConfigError("threshold must lie in [0, 1)")
        if self.nms_mode not in ("bev", "3d"):
            raise ConfigError("nms_mode must be bev or 3d")
        for name in ("nms_iou", "cluster_iou"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.scene.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    # -- seeds -------------------------------------------------------------
    @property
    def scene_seed(self) -> int:
        return derive_seed(self.seed, "scenes/eval")

    @property
    def labeled_seed(self) -> int:
        return derive_seed(self.seed, "scenes/labeled")

    @property
    def detector_seed(self) -> int:
        return derive_seed(self.seed, "detector")

    @property
    def train_seed(self) -> int:
        return derive_seed(self.seed, "votenet") % 2**32

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scene"] = asdict(self.scene)
        d["noise"] = self.noise.to_dict()
        d["ensemble"] = self.ensemble.to_dict()
        d["train"] = self.train.to_dict()
        d["thresholds"] = asdict(self.thresholds)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        try:
            if "scene" in d:
                d["scene"] = SceneConfig.from_dict(d["scene"])
            if "noise" in d:
                d["noise"] = NoiseModel.from_dict(d["noise"])
            if "ensemble" in d:
                d["ensemble"] = EnsembleConfig.from_dict(d["ensemble"])
            if "train" in d:
                d["train"] = cbv.TrainConfig(**d["train"])
            if "thresholds" in d:
                d["thresholds"] = ClassThresholds(**d["thresholds"])
            cfg = cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from e
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file {p} not found")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: not valid JSON ({e})") from e

    def sha256(self) -> str:
        """Hash of everything that influences results (output dir and worker count excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    # -- paths -------------------------------------------------------------
    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def eval_dir(self) -> Path:
        return self.out_dir / "data" / "eval"

    @property
    def labeled_dir(self) -> Path:
        return self.out_dir / "data" / "labeled"

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / "votenet.bin"

    def detectors(self) -> list[DetectorHandle]:
        return checkpoint_detectors(self.noise, self.detector_seed, self.ensemble.checkpoints)

    def variant_threshold(self, variant: str) -> float:
        if self.threshold is not None and variant == self.variant:
            return self.threshold
        return DEFAULT_THRESHOLDS[variant]

    def variants(self) -> tuple[str, ...]:
        return VARIANTS if self.variant == "all" else (self.variant,)


# ---------------------------------------------------------------------------
# Data


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen(cfg: ExperimentConfig, force: bool = False) -> dict[str, Path]:
    """Write the evaluation and labelled scene sets."""
    cfg.validate()
    for d in (cfg.eval_dir, cfg.labeled_dir):
        if d.exists() and any(d.iterdir()) and not force:
            raise FileExistsError(f"{d} already holds data; pass --force to overwrite")
    for d in (cfg.eval_dir, cfg.labeled_dir):
        if d.exists():
            for p in sorted(d.rglob("*"), reverse=True):
                p.unlink() if p.is_file() else p.rmdir()
    write_dataset(cfg.eval_dir, generate_scenes(cfg.scene, cfg.scene_seed, cfg.n_scenes))
    write_dataset(cfg.labeled_dir, generate_scenes(cfg.scene, cfg.labeled_seed, cfg.train_scenes + cfg.heldout_scenes))
    return {"eval": cfg.eval_dir, "labeled": cfg.labeled_dir}


def _load(path: Path, what: str) -> list[Scene]:
    if not (path / "gt.jsonl").exists():
        raise MissingInputError(f"{what} dataset not found at {path}; run `pseudolabel3d gen` first")
    return read_dataset(path)


def load_vote_net(cfg: ExperimentConfig) -> cbv.VoteNet:
    if not cfg.checkpoint_path.exists():
        raise MissingInputError(f"vote-net checkpoint {cfg.checkpoint_path} not found; run `pseudolabel3d train-votenet` first")
    return cbv.load_vote_net(cfg.checkpoint_path)


# ---------------------------------------------------------------------------
# Vote-net training


def center_errors(scenes: Sequence[Scene], detectors, ens: EnsembleConfig, net: cbv.VoteNet, cluster_iou: float = 0.5) -> dict[str, float]:
    """Held-out cluster centre errors against the anchor's gt match.

    Per cluster (positive anchor only): mean member error before voting,
    mean vote error after, and the error of the fused box; each averaged
    over clusters.
    """
    before, after, fused = [], [], []
    for sc in scenes:
        boxes, classes, scores = run_ste(sc, detectors, ens).arrays()
        if not len(boxes):
            continue
        best, j = cbv.best_gt_match(boxes, classes, sc)
        pos = cbv.label_members(scores, best) == 1.0
        res, logits = net.predict(cbv.roi_features(boxes, classes, scores, sc))
        voted = cbv.apply_residuals(boxes, res)
        obj = cbv.objectness_from_logit(logits)
        for idx in cbv.cluster_indices(boxes, classes, scores, cluster_iou):
            if not pos[idx[0]]:
                continue
            gt = sc.gt_boxes[j[idx[0]], :3]
            before.append(np.linalg.norm(boxes[idx, :3] - gt, axis=1).mean())
            after.append(np.linalg.norm(voted[idx, :3] - gt, axis=1).mean())
            fused.append(np.linalg.norm(cbv.aggregate_votes(voted[idx], obj[idx])[:3] - gt))
    if not before:
        nan = float("nan")
        return {"before": nan, "after": nan, "fused": nan, "clusters": 0}
    return {"before": float(np.mean(before)), "after": float(np.mean(after)), "fused": float(np.mean(fused)), "clusters": len(before)}


def train_from_scenes(cfg: ExperimentConfig, scenes: Sequence[Scene]) -> tuple[cbv.VoteNet, cbv.TrainHistory, dict]:
    train_sc = scenes[: cfg.train_scenes]
    held_sc = scenes[cfg.train_scenes : cfg.train_scenes + cfg.heldout_scenes]
    if not train_sc or not held_sc:
        raise MissingInputError("labelled dataset has too few frames for the configured train/held-out split")
    dets = cfg.detectors()
    train = cbv.build_training_set(train_sc, dets, cfg.ensemble)
    held = cbv.build_training_set(held_sc, dets, cfg.ensemble)
    hyper = replace(cfg.train, seed=cfg.train.seed or cfg.train_seed)
    net, hist = cbv.train_vote_net(train, hyper, held)
    err = center_errors(held_sc, dets, cfg.ensemble, net, cfg.cluster_iou)
    summary = {
        "train_seeds": len(train),
        "heldout_seeds": len(held),
        "heldout_loss_initial": hist.heldout_loss[0],
        "heldout_loss_final": hist.heldout_loss[-1],
        "heldout_loss_reduction": hist.heldout_reduction,
        "heldout_clusters": err["clusters"],
        "center_error_before": err["before"],
        "center_error_after": err["after"],
        "center_error_fused": err["fused"],
    }
    return net, hist, summary


def cmd_train_votenet(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    scenes = _load(cfg.labeled_dir, "labelled")
    net, hist, summary = train_from_scenes(cfg, scenes)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cbv.save_vote_net(net, cfg.checkpoint_path)
    rows = [
        {"epoch": i, "train_loss": hist.train_loss[i - 1] if i else None, "heldout_loss": h}
        for i, h in enumerate(hist.heldout_loss)
    ]
    (cfg.out_dir / "training_curve.csv").write_text(to_csv(rows, ["epoch", "train_loss", "heldout_loss"]))
    (cfg.out_dir / "votenet_eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("held-out loss %.4f -> %.4f", hist.heldout_loss[0], hist.heldout_loss[-1])
    return cfg.checkpoint_path


# ---------------------------------------------------------------------------
# Pipeline variants


def _nms(arrays, cfg: ExperimentConfig):
    b, c, s = arrays
    keep = nms_indices(b, c, s, cfg.nms_iou, cfg.nms_mode)
    return b[keep], c[keep], s[keep]


def frame_outputs(scene: Scene, cfg: ExperimentConfig, detectors, net: cbv.VoteNet | None, variants: Sequence[str]) -> dict:
    """Unfiltered (pre score-cut) pseudo labels of every requested variant for one frame."""
    out = {}
    if "baseline" in variants:
        out["baseline"] = _nms(detect_arrays(detectors[0], scene, ViewTransform()), cfg)
    if {"ste", "ste-thresh", "ste-cbv"} & set(variants):
        seeds = run_ste(scene, detectors, cfg.ensemble)
        if {"ste", "ste-thresh"} & set(variants):
            deduped = _nms(seeds.arrays(), cfg)
            for v in ("ste", "ste-thresh"):
                if v in variants:
                    out[v] = deduped
        if "ste-cbv" in variants:
            out["ste-cbv"] = cbv.run_cbv_arrays(
                seeds,
                scene,
                net,
                cfg.nms_iou,
                cfg.cluster_iou,
                cfg.ensemble.expected_votes,
                cfg.nms_mode,
            ).arrays()
    return out


def _frame_job(args):
    scene, cfg, net, variants = args
    return frame_outputs(scene, cfg, cfg.detectors(), net, variants)


def run_frames(scenes: Sequence[Scene], cfg: ExperimentConfig, net: cbv.VoteNet | None, variants: Sequence[str]) -> list[dict]:
    """Per-frame outputs in frame order regardless of worker scheduling."""
    if cfg.workers <= 1:
        dets = cfg.detectors()
        return [frame_outputs(sc, cfg, dets, net, variants) for sc in scenes]
    with ProcessPoolExecutor(cfg.workers) as pool:
        return list(pool.map(_frame_job, [(sc, cfg, net, variants) for sc in scenes], chunksize=8))


@dataclass
class VariantMetrics:
    variant: str
    threshold: float
    counts: dict  # ClassId -> (tp, fp, fn)

    def rows(self) -> list[dict]:
        out = []
        for c in ClassId:
            tp, fp, fn = self.counts[c]
            out.append(
                {
                    "variant": self.variant,
                    "class": c.label,
                    "recall": tp / (tp + fn) if tp + fn else None,
                    "precision": tp / (tp + fp) if tp + fp else None,
                    "tp": tp,
                    "fp": fp,
                    "fn": fn,
                }
            )
        return out

    def vehicle(self) -> tuple[float | None, float | None]:
        r = self.rows()[int(ClassId.VEHICLE)]
        return r["recall"], r["precision"]


def score_variant(variant: str, per_frame: Sequence, scenes: Sequence[Scene], cfg: ExperimentConfig) -> VariantMetrics:
    c = cfg.variant_threshold(variant)
    results = [match_frame(filter_by_score(d, c), sc, cfg.thresholds) for d, sc in zip(per_frame, scenes)]
    return VariantMetrics(variant, c, class_counts(results))


METRIC_COLUMNS = ["variant", "class", "recall", "precision", "tp", "fp", "fn"]
SWEEP_COLUMNS = ["c", "recall", "precision"]


@dataclass
class RunResult:
    metrics: dict[str, VariantMetrics]
    sweep: list
    manifest: dict


def evaluate(cfg: ExperimentConfig, scenes: Sequence[Scene], net: cbv.VoteNet | None, sweep_grid=SWEEP_GRID) -> RunResult:
    variants = cfg.variants()
    t0 = time.perf_counter()
    outputs = run_frames(scenes, cfg, net, variants)
    metrics = {v: score_variant(v, [o[v] for o in outputs], scenes, cfg) for v in variants}
    sweep_variant = "ste" if cfg.variant == "all" else cfg.variant
    sweep = threshold_sweep([o[sweep_variant] for o in outputs], scenes, cfg.thresholds, sweep_grid)
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.sha256(),
        "variants": list(variants),
        "sweep_variant": sweep_variant,
        "frames": len(scenes),
    }
    log.info("evaluated %d frames in %.1fs", len(scenes), time.perf_counter() - t0)
    return RunResult(metrics, sweep, manifest)


def write_run(result: RunResult, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r for m in result.metrics.values() for r in m.rows()]
    paths = {"metrics": out_dir / "metrics.csv", "sweep": out_dir / "sweep.csv", "manifest": out_dir / "manifest.json"}
    paths["metrics"].write_text(to_csv(rows, METRIC_COLUMNS))
    sweep_rows = [{"c": r.c, "recall": r.recall, "precision": r.precision} for r in result.sweep]
    paths["sweep"].write_text(to_csv(sweep_rows, SWEEP_COLUMNS))
    manifest = dict(result.manifest)
    manifest["outputs"] = {k: _sha_file(paths[k]) for k in ("metrics", "sweep")}
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def cmd_run(cfg: ExperimentConfig) -> dict[str, Path]:
    cfg.validate()
    scenes = _load(cfg.eval_dir, "evaluation")
    net = load_vote_net(cfg) if "ste-cbv" in cfg.variants() else None
    return write_run(evaluate(cfg, scenes, net), cfg.out_dir)


def cmd_sweep(cfg: ExperimentConfig, grid: Sequence[float] = SWEEP_GRID) -> Path:
    """Score-threshold sweep of one variant (STE by default) written to sweep.csv."""
    cfg.validate()
    variant = "ste" if cfg.variant == "all" else cfg.variant
    scenes = _load(cfg.eval_dir, "evaluation")
    net = load_vote_net(cfg) if variant == "ste-cbv" else None
    outputs = run_frames(scenes, cfg, net, (variant,))
    rows = threshold_sweep([o[variant] for o in outputs], scenes, cfg.thresholds, grid)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / "sweep.csv"
    path.write_text(to_csv([{"c": r.c, "recall": r.recall, "precision": r.precision} for r in rows], SWEEP_COLUMNS))
    return path
