import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseudolabel3d.detsim import DetectorHandle, NoiseModel, SceneConfig, checkpoint_detectors, generate_scene
from pseudolabel3d.ensemble import EnsembleConfig, SeedBoxSet, generate_views, read_seed_dump, run_ste, write_seed_dump
from pseudolabel3d.evaluation import match_frame
from pseudolabel3d.geom3d import ViewTransform, iou_3d_matrix, normalize_yaw_array


def test_default_has_twelve_views():
    views = generate_views(EnsembleConfig())
    assert len(views) == 12 == EnsembleConfig().num_views
    assert len(set(v.key() for v in views)) == 12


def test_single_identity_view():
    assert generate_views(EnsembleConfig.single_view()) == [ViewTransform()]


def test_view_order_flips_outer():
    cfg = EnsembleConfig(rotations=(0.0, 0.5))
    got = [(v.flip_x, v.flip_y, v.rotation) for v in generate_views(cfg)]
    assert got == [
        (False, False, 0.0), (False, False, 0.5),
        (True, False, 0.0), (True, False, 0.5),
        (False, True, 0.0), (False, True, 0.5),
        (True, True, 0.0), (True, True, 0.5),
    ]


@pytest.mark.parametrize("kw", [{"rotations": ()}, {"flips": ()}])
def test_empty_view_sets_rejected(kw):
    with pytest.raises(ValueError):
        generate_views(EnsembleConfig(**kw))


def test_presets():
    assert EnsembleConfig().expected_votes == 12
    assert EnsembleConfig.temporal(3).expected_votes == 36
    assert EnsembleConfig.temporal(3).checkpoints == (0, 1, 2)
    cfg = EnsembleConfig.temporal(2)
    assert EnsembleConfig.from_dict(cfg.to_dict()) == cfg


def test_single_view_noiseless_equals_gt():
    sc = generate_scene(SceneConfig(), 0)
    seeds = run_ste(sc, [DetectorHandle(NoiseModel.noiseless(), 0)], EnsembleConfig.single_view())
    assert np.allclose(seeds.boxes, sc.gt_boxes) and np.array_equal(seeds.classes, sc.gt_classes)


def test_noiseless_twelve_duplicates():
    sc = generate_scene(SceneConfig(), 1)
    seeds = run_ste(sc, [DetectorHandle(NoiseModel.noiseless(), 0)], EnsembleConfig())
    n = len(sc)
    assert len(seeds) == 12 * n
    for v in range(12):
        part = seeds.boxes[seeds.views == v]
        assert np.allclose(part[:, :6], sc.gt_boxes[:, :6], atol=1e-6)
        assert np.allclose(normalize_yaw_array(part[:, 6] - sc.gt_boxes[:, 6]), 0, atol=1e-6)
    iou = iou_3d_matrix(seeds.boxes, sc.gt_boxes)
    assert np.all(iou.max(axis=1) > 0.99)


def test_provenance_and_nesting_order():
    sc = generate_scene(SceneConfig(), 2)
    dets = checkpoint_detectors(NoiseModel.noiseless(), 0, [0, 1])
    seeds = run_ste(sc, dets, EnsembleConfig(checkpoints=(0, 1)))
    n = len(sc)
    assert len(seeds.provenance) == len(seeds) == 24 * n
    # checkpoints outer, views inner
    assert seeds.checkpoints.tolist() == [0] * 12 * n + [1] * 12 * n
    assert seeds.views[: 2 * n].tolist() == [0] * n + [1] * n


def test_checkpoint_mismatch_rejected():
    sc = generate_scene(SceneConfig(), 0)
    with pytest.raises(ValueError):
        run_ste(sc, checkpoint_detectors(NoiseModel(), 0, [0]), EnsembleConfig(checkpoints=(0, 1)))
    with pytest.raises(ValueError):
        run_ste(sc, [], EnsembleConfig())


def test_deterministic_and_executor_order():
    sc = generate_scene(SceneConfig(), 3)
    d = [DetectorHandle(NoiseModel(), 4)]
    a = run_ste(sc, d, EnsembleConfig())
    with ThreadPoolExecutor(4) as pool:
        b = run_ste(sc, d, EnsembleConfig(), executor=pool)
    for x, y in zip((a.boxes, a.classes, a.scores, a.views, a.checkpoints), (b.boxes, b.classes, b.scores, b.views, b.checkpoints)):
        assert np.array_equal(x, y)


def _recall(seeds, sc):
    r = match_frame(seeds, sc)
    return r.tp / max(r.tp + r.fn, 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 11))
def test_adding_a_view_never_lowers_recall(frame, k):
    sc = generate_scene(SceneConfig(), 5, frame)
    d = [DetectorHandle(NoiseModel(), 8)]
    views = generate_views(EnsembleConfig())
    rot = sorted({v.rotation for v in views})
    # grow the rotation set on a single flip setting, then add a flip
    small = EnsembleConfig(rotations=tuple(rot[: max(1, k % 3)]), flips=((False, False),))
    big = EnsembleConfig(rotations=small.rotations, flips=((False, False), (True, False)))
    assert _recall(run_ste(sc, d, big), sc) >= _recall(run_ste(sc, d, small), sc)


def test_seed_dump_round_trip(tmp_path):
    sc = generate_scene(SceneConfig(), 6)
    seeds = run_ste(sc, [DetectorHandle(NoiseModel(), 1)], EnsembleConfig())
    path = tmp_path / "seeds.jsonl"
    write_seed_dump(path, [(6, seeds)])
    back = read_seed_dump(path)[6]
    assert np.allclose(back.boxes, seeds.boxes, atol=1e-12)
    assert back.provenance == seeds.provenance
    assert np.array_equal(back.scores, seeds.scores)


def test_seedboxset_validation():
    with pytest.raises(ValueError):
        SeedBoxSet(np.zeros((2, 7)) + 1, np.zeros(2), np.ones(2), np.zeros(3), np.zeros(2))
