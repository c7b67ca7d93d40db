import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import numeric_grad, reference_greedy_pairs, rel_error
from pseudolabel3d import bcl, tinynet
from pseudolabel3d.bcl import (
    BevFeatureMap,
    PairSet,
    ProjectionHead,
    bilinear_interp,
    box_feature,
    box_sample_points,
    combined_unlabeled_loss,
    contrastive_loss,
    greedy_match,
    info_nce,
    projection_head,
    unlabeled_detection_loss,
)
from pseudolabel3d.geom3d import Box3D, Detection


def random_map(seed=0, h=12, w=15, c=3, cell=0.7, origin=(-3.0, -4.0)):
    return BevFeatureMap(np.random.default_rng(seed).normal(size=(h, w, c)), origin, cell)


def scalar_info_nce(z, tau, variant="literal"):
    """Direct double loop over the InfoNCE definition."""
    n = len(z)
    total = 0.0
    for p in range(n):
        q = p ^ 1
        den = sum(math.exp(float(z[p] @ z[k]) / tau) for k in range(n) if k != (q if variant == "literal" else p))
        total += -math.log(math.exp(float(z[p] @ z[q]) / tau) / den)
    return total / n


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- bilinear sampling ----------------------------------------------------------


def test_cell_centre_returns_cell():
    m = random_map()
    x = m.origin[0] + 4 * m.cell_size
    y = m.origin[1] + 7 * m.cell_size
    assert np.allclose(bilinear_interp(m, x, y), m.grid[7, 4], atol=1e-12)


def test_midpoint_of_two_cells():
    g = np.zeros((1, 2, 1))
    g[0, 1, 0] = 1.0
    m = BevFeatureMap(g, (0.0, 0.0), 1.0)
    assert bilinear_interp(m, 0.5, 0.0)[0] == 0.5


def naive_bilinear(m, x, y):
    h, w, _ = m.grid.shape
    fx = min(max((x - m.origin[0]) / m.cell_size, 0.0), w - 1)
    fy = min(max((y - m.origin[1]) / m.cell_size, 0.0), h - 1)
    x0, y0 = int(math.floor(fx)), int(math.floor(fy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    a, b = fx - x0, fy - y0
    g = m.grid
    return (1 - a) * (1 - b) * g[y0, x0] + a * (1 - b) * g[y0, x1] + (1 - a) * b * g[y1, x0] + a * b * g[y1, x1]


def test_matches_naive_formula():
    m = random_map(1)
    rng = np.random.default_rng(2)
    for x, y in rng.uniform(-6, 10, (300, 2)):
        assert np.max(np.abs(bilinear_interp(m, x, y) - naive_bilinear(m, x, y))) < 1e-12


def test_vectorised_sample_shape():
    m = random_map()
    assert m.sample(np.zeros((4, 5)), np.zeros((4, 5))).shape == (4, 5, 3)


def test_border_clamp():
    m = random_map()
    assert np.allclose(bilinear_interp(m, -100.0, -100.0), m.grid[0, 0])
    assert np.allclose(bilinear_interp(m, 100.0, 100.0), m.grid[-1, -1])


@pytest.mark.parametrize("grid", [np.zeros((0, 2, 1)), np.zeros((2, 2)), np.full((2, 2, 1), np.nan)])
def test_map_validation(grid):
    with pytest.raises(ValueError):
        BevFeatureMap(grid)


# -- box features ---------------------------------------------------------------


def test_constant_map():
    v = np.array([1.5, -2.0, 0.25])
    m = BevFeatureMap(np.broadcast_to(v, (6, 6, 3)).copy(), (0, 0), 1.0)
    assert np.array_equal(box_feature(m, Box3D(2.3, 2.9, 0, 2, 1, 1, 0.7)), np.tile(v, 5))


def test_aligned_unit_box():
    m = BevFeatureMap(np.random.default_rng(3).normal(size=(3, 3, 2)), (-1.0, -1.0), 0.5)
    # side midpoints at (+-0.5, 0) and (0, +-0.5) sit on cell centres
    f = box_feature(m, Box3D(-0.5, -0.5, 0, 1, 1, 1, 0.0)).reshape(5, 2)
    assert np.allclose(f, m.grid[[1, 1, 1, 2, 0], [1, 2, 0, 1, 1]], atol=1e-12)


@settings(max_examples=100)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.2, 6), st.floats(0.2, 4), st.floats(-math.pi, math.pi))
def test_sample_points_match_corner_geometry(cx, cy, l, w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    corners = np.array([[cx + c * a - s * b, cy + s * a + c * b] for a, b in ((l / 2, w / 2), (l / 2, -w / 2), (-l / 2, -w / 2), (-l / 2, w / 2))])
    fl, fr, bl_, bll = corners
    want = np.array([corners.mean(axis=0), (fl + fr) / 2, (bl_ + bll) / 2, (fl + bll) / 2, (fr + bl_) / 2])
    assert np.max(np.abs(box_sample_points(Box3D(cx, cy, 0, l, w, 1, yaw)) - want)) < 1e-12


def test_translation_locality():
    m = random_map(4, h=30, w=30)
    box = Box3D(4.1, 3.3, 0, 3.0, 1.5, 1, 0.4)
    k = 3
    shift = (k * m.cell_size, -2 * k * m.cell_size)
    moved = BevFeatureMap(m.grid, (m.origin[0] + shift[0], m.origin[1] + shift[1]), m.cell_size)
    b2 = Box3D(box.cx + shift[0], box.cy + shift[1], 0, box.l, box.w, 1, box.yaw)
    assert np.max(np.abs(box_feature(m, box) - box_feature(moved, b2))) < 1e-12


def test_synthetic_map_breaks_heading_symmetry():
    box = Box3D(0, 0, 0, 4, 2, 1, 0.3)
    m = bcl.synthetic_bev_map([box], extent=20, cell_size=0.25)
    flipped = Box3D(0, 0, 0, 4, 2, 1, 0.3 + math.pi)
    assert not np.allclose(box_feature(m, box), box_feature(m, flipped))


def test_feature_map_round_trip(tmp_path):
    m = random_map(5)
    m.grid = m.grid.astype(np.float32).astype(np.float64)  # blobs store float32
    bcl.save_feature_map(m, tmp_path / "m.bin")
    back = bcl.load_feature_map(tmp_path / "m.bin")
    assert np.array_equal(back.grid, m.grid) and back.origin == m.origin and back.cell_size == m.cell_size


# -- matching -------------------------------------------------------------------


def dets(centres, classes):
    return [Detection(Box3D(x, y, z, 2, 1, 1), int(k), 0.5) for (x, y, z), k in zip(centres, classes)]


def test_identical_lists_match_perfectly():
    rng = np.random.default_rng(0)
    c = rng.uniform(-30, 30, (9, 3))
    k = rng.integers(0, 3, 9)
    ps = greedy_match(dets(c, k), dets(c, k))
    assert sorted(ps.pairs) == [(i, i) for i in range(9)]


def test_empty_list_gives_no_pairs():
    d = dets([[0, 0, 0]], [0])
    assert len(greedy_match(d, [])) == 0 and len(greedy_match([], d)) == 0


def test_gating_and_class():
    a = dets([[0, 0, 0], [10, 0, 0]], [0, 0])
    b = dets([[2.5, 0, 0], [10.5, 0, 0]], [0, 1])
    assert greedy_match(a, b).pairs == []


@pytest.mark.parametrize("seed", range(20))
def test_matches_exhaustive_reference(seed):
    rng = np.random.default_rng(seed)
    c1 = rng.uniform(-4, 4, (10, 3))
    c2 = rng.uniform(-4, 4, (10, 3))
    k1, k2 = rng.integers(0, 2, 10), rng.integers(0, 2, 10)
    got = greedy_match(dets(c1, k1), dets(c2, k2)).pairs
    assert got == reference_greedy_pairs(c1, k1, c2, k2, 2.0)


def test_arrange_interleaves():
    z1 = np.arange(6.0).reshape(3, 2)
    z2 = -np.arange(6.0).reshape(3, 2)
    out = PairSet([(2, 0), (0, 1)]).arrange(z1, z2)
    assert np.array_equal(out, [z1[2], z2[0], z1[0], z2[1]])


# -- InfoNCE --------------------------------------------------------------------


def test_single_identical_pair_is_zero():
    z = unit_rows(np.array([[0.3, -0.2, 0.9]] * 2))
    loss, grad = info_nce(z)
    assert loss == 0.0


def test_orthogonal_pairs_hand_value():
    z = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
    want = math.log(1.0 + 2.0 * math.exp(-10.0))
    assert info_nce(z, 0.1)[0] == pytest.approx(want, rel=1e-12)
    assert scalar_info_nce(z, 0.1) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("variant", ["literal", "simclr"])
@pytest.mark.parametrize("seed", range(8))
def test_matches_scalar_definition_and_fd(variant, seed):
    rng = np.random.default_rng(seed)
    m = 1 + seed % 8
    z = unit_rows(rng.normal(size=(2 * m, 5)))
    loss, dz = info_nce(z, 0.1, variant)
    assert loss == pytest.approx(scalar_info_nce(z, 0.1, variant), rel=1e-10)
    fd = numeric_grad(lambda v: info_nce(v, 0.1, variant, check_normalized=False)[0], z, 1e-5)
    assert rel_error(dz, fd) < 1e-5


def test_simclr_variant_is_nonnegative_and_zero_for_single_pair():
    rng = np.random.default_rng(1)
    z = unit_rows(rng.normal(size=(2, 4)))
    assert info_nce(z, variant="simclr")[0] == pytest.approx(0.0, abs=1e-12)
    z = unit_rows(rng.normal(size=(8, 4)))
    assert info_nce(z, variant="simclr")[0] >= 0.0


def test_monotone_in_positive_similarity():
    # two pairs in orthogonal planes: rotating z2 toward z1 raises s12 and leaves every other similarity fixed
    def emb(t):
        return np.array([[1.0, 0, 0, 0], [math.cos(t), math.sin(t), 0, 0], [0, 0, 1.0, 0], [0, 0, 0.6, 0.8]])

    losses = [info_nce(emb(t))[0] for t in np.linspace(1.5, 0.0, 12)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_pair_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 7))
    z = unit_rows(rng.normal(size=(2 * m, 6)))
    perm = rng.permutation(m)
    rows = np.stack([2 * perm, 2 * perm + 1], axis=1).ravel()
    assert info_nce(z[rows])[0] == pytest.approx(info_nce(z)[0], rel=1e-12)


@pytest.mark.parametrize("z", [np.zeros((0, 3)), np.eye(3), np.ones((2, 3))])
def test_bad_input_rejected(z):
    with pytest.raises(ValueError):
        info_nce(z)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        info_nce(np.eye(2), variant="other")


# -- projection head ------------------------------------------------------------


def test_identity_head_normalises_input():
    n = 6
    head = ProjectionHead(tinynet.Mlp2(np.eye(n), np.zeros(n), np.eye(n), np.zeros(n)))
    x = np.abs(np.random.default_rng(0).normal(size=n))
    assert np.allclose(projection_head(head, x), x / np.linalg.norm(x), atol=1e-15)


def test_zero_weights_give_bias_direction():
    head = ProjectionHead(tinynet.Mlp2.zeros(5, 4, 3))
    head.mlp.b2[:] = [3.0, 0.0, -4.0]
    z = projection_head(head, np.random.default_rng(0).normal(size=(7, 5)))
    assert np.allclose(z, [0.6, 0.0, -0.8])


def test_zero_output_raises():
    with pytest.raises(FloatingPointError):
        projection_head(ProjectionHead(tinynet.Mlp2.zeros(5, 4, 3)), np.ones(5))


@pytest.mark.parametrize("seed", range(5))
def test_head_plus_info_nce_gradient(seed):
    rng = np.random.default_rng(seed)
    head = ProjectionHead.init(6, hidden=8, n_out=4, seed=seed)
    h = rng.normal(size=(2 * (1 + seed), 6))
    _, grads = contrastive_loss(head, h)
    for k in ("W1", "b1", "W2", "b2"):

        def f(v, k=k):
            saved = getattr(head.mlp, k)
            setattr(head.mlp, k, v)
            val = contrastive_loss(head, h)[0]
            setattr(head.mlp, k, saved)
            return val

        assert rel_error(grads[k], numeric_grad(f, getattr(head.mlp, k).copy(), 1e-6)) < 1e-4


def test_box_contrastive_loss_pipeline():
    boxes = [Box3D(5.0 * i - 10, 2.0 * i, 0, 4, 2, 1.5, 0.3 * i) for i in range(5)]
    m1 = bcl.synthetic_bev_map(boxes, extent=60, seed=0)
    m2 = bcl.synthetic_bev_map(boxes, extent=60, seed=1)
    d = [Detection(b, 0, 0.9) for b in boxes]
    head = ProjectionHead.init(5 * m1.channels, seed=0)
    loss, grads, pairs = bcl.box_contrastive_loss(head, m1, m2, d, d)
    assert len(pairs) == 5 and math.isfinite(loss)
    assert set(grads) == {"W1", "b1", "W2", "b2"}
    loss0, g0, p0 = bcl.box_contrastive_loss(head, m1, m2, d, [])
    assert loss0 == 0.0 and len(p0) == 0 and all(not v.any() for v in g0.values())


def test_embed_boxes_normalised():
    boxes = [Box3D(1, 2, 0, 4, 2, 1, 0.1), Box3D(-5, 3, 0, 1, 1, 1, 2.0)]
    m = bcl.synthetic_bev_map(boxes, extent=30)
    emb = bcl.embed_boxes(m, boxes, ProjectionHead.init(5 * m.channels, seed=1))
    assert len(emb) == 2
    for e in emb:
        assert e.raw.shape == (5 * m.channels,) and e.projected.shape == (bcl.EMBED_DIM,)
        assert abs(np.linalg.norm(e.projected) - 1) < 1e-12


# -- loss composition -----------------------------------------------------------


def test_combined_loss_arithmetic():
    assert combined_unlabeled_loss(0.0, 1.0, 2.0, 0.05) == pytest.approx(1.1)
    assert combined_unlabeled_loss(0.0, 0.0, 0.0) == 0.0
    assert combined_unlabeled_loss(0.7, 1.3, 9.0, alpha=0.0) == 0.7 + 1.3


def test_two_view_average():
    assert unlabeled_detection_loss(1.0, 2.0, 3.0, 4.0) == 5.0


def test_non_finite_terms_rejected():
    with pytest.raises(ValueError):
        combined_unlabeled_loss(0.0, math.nan, 1.0)
