import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from stagecrop.arp import (
    ArpConfig,
    arp_crop,
    arp_regions,
    centers_bbox,
    connected_components,
    threshold_set,
    weighted_center,
)
from stagecrop.attention import AttentionMap
from stagecrop.grid import PatchGrid, PixelBox, PixelPoint, point_in_box

from oracles import brute_arp, flood_fill_components, random_map


def amap(w, patch=28, img=None):
    w = np.asarray(w, dtype=float)
    rows, cols = w.shape
    iw, ih = img if img else (cols * patch, rows * patch)
    return AttentionMap(PatchGrid(rows, cols, patch, iw, ih), w)


def two_blob_map():
    # 6x6 grid, 28px patches, 168x168 image.
    # blob A: (0,0)=3, (0,1)=2 -> score 5, center ((3*14 + 2*42)/5, 14) = (25.2, 14)
    # blob B: (4,5)=1, (5,5)=2 -> score 3, center (154, (126 + 2*154)/3) = (154, 144.666..)
    w = np.zeros((6, 6))
    w[0, 0], w[0, 1] = 3, 2
    w[4, 5], w[5, 5] = 1, 2
    return amap(w)


class TestThreshold:
    def test_boundary_is_inclusive(self):
        w = np.array([[0.8, 0.24, 0.2399]])
        assert threshold_set(amap(w), 0.3) == {(0, 0), (0, 1)}

    def test_one_hot(self):
        w = np.zeros((4, 4))
        w[2, 1] = 0.7
        for tau in (0.01, 0.3, 1.0):
            assert threshold_set(amap(w), tau) == {(2, 1)}

    def test_uniform(self):
        assert len(threshold_set(amap(np.full((3, 5), 0.2)), 1.0)) == 15

    def test_tau_range(self):
        with pytest.raises(ValueError):
            threshold_set(amap(np.ones((2, 2))), 0.0)


class TestConnectedComponents:
    def test_two_components_4(self):
        assert connected_components({(0, 0), (0, 1), (3, 3)}, 4) == [((0, 0), (0, 1)), ((3, 3),)]

    def test_diagonal_depends_on_connectivity(self):
        s = {(0, 0), (1, 1)}
        assert len(connected_components(s, 4)) == 2
        assert connected_components(s, 8) == [((0, 0), (1, 1))]

    def test_order_by_smallest_member(self):
        s = {(5, 0), (0, 7), (0, 6), (2, 2)}
        assert connected_components(s, 4) == [((0, 6), (0, 7)), ((2, 2),), ((5, 0),)]

    def test_u_shape_merges(self):
        # two arms that only join at the bottom row
        s = {(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2)}
        assert len(connected_components(s, 4)) == 1

    def test_matches_flood_fill_on_random_masks(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            rows, cols = rng.integers(1, 65, size=2)
            density = rng.uniform(0.05, 0.7)
            mask = rng.random((rows, cols)) < density
            cells = set(map(tuple, np.argwhere(mask).tolist()))
            for conn in (4, 8):
                assert connected_components(cells, conn) == flood_fill_components(cells, conn)


class TestWeightedCenter:
    def test_single_patch(self):
        a = amap(np.eye(3))
        assert weighted_center(a, [(1, 1)]) == PixelPoint(42, 42)

    def test_equal_weights_midpoint(self):
        a = amap([[1.0, 0.0, 1.0]])
        assert weighted_center(a, [(0, 0), (0, 2)]) == PixelPoint(42, 14)

    def test_weighted(self):
        a = amap([[1.0, 3.0]])
        assert weighted_center(a, [(0, 0), (0, 1)]) == PixelPoint(35, 14)

    def test_zero_weight(self):
        a = amap([[1.0, 0.0]])
        with pytest.raises(ValueError):
            weighted_center(a, [(0, 1)])


class TestArpCrop:
    def test_one_hot_min_crop(self):
        w = np.zeros((36, 36))
        w[10, 20] = 1.0
        a = amap(w, img=(1000, 1000))
        box = arp_crop(a, ArpConfig(min_crop_px=200))
        # hot patch center (574, 294)
        assert box == PixelBox(474, 194, 674, 394)

    def test_two_blobs_span_both_centers(self):
        box = arp_crop(two_blob_map(), ArpConfig(k=20, pad_px=10, min_crop_px=1))
        assert box.x1 == pytest.approx(15.2)
        assert box.y1 == pytest.approx(4.0)
        assert box.x2 == pytest.approx(164.0)
        assert box.y2 == pytest.approx(154.0 + 2 / 3)

    def test_top1_keeps_heavier_blob(self):
        box = arp_crop(two_blob_map(), ArpConfig(k=1, pad_px=0, min_crop_px=56))
        # degenerate box at (25.2, 14), grown to 56x56, then clamped at 0
        assert box.x1 == 0 and box.y1 == 0
        assert box.x2 == pytest.approx(53.2)
        assert box.y2 == pytest.approx(42.0)

    def test_regions_ranked_by_score(self):
        regs = arp_regions(two_blob_map(), ArpConfig())
        assert [r.score for r in regs] == [5.0, 3.0]
        assert regs[0].center == PixelPoint(25.2, 14)

    def test_score_ties_keep_component_order(self):
        w = np.zeros((1, 5))
        w[0, 0] = w[0, 4] = 1.0
        regs = arp_regions(amap(w), ArpConfig(k=1))
        assert regs[0].patches == ((0, 0),)

    def test_min_crop_larger_than_image(self):
        box = arp_crop(amap(np.ones((3, 3))), ArpConfig(min_crop_px=1000))
        assert box == PixelBox(0, 0, 84, 84)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(150):
            w, patch, iw, ih = random_map(rng, 32)
            cfg = ArpConfig(tau=float(rng.choice([0.1, 0.3, 0.7])), k=int(rng.choice([1, 5, 20])),
                            connectivity=int(rng.choice([4, 8])),
                            min_crop_px=float(rng.integers(1, 300)), pad_px=float(rng.integers(0, 40)))
            a = AttentionMap(PatchGrid.covering(iw, ih, patch), w)
            got = arp_crop(a, cfg).as_list()
            want = brute_arp(w.tolist(), patch, iw, ih, cfg.tau, cfg.k, cfg.connectivity,
                             cfg.min_crop_px, cfg.pad_px)
            assert tuple(got) == want


maps = hnp.arrays(float, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                  elements=st.floats(0, 100))


@settings(max_examples=150)
@given(maps, st.sampled_from([0.1, 0.3, 0.7]), st.integers(1, 6), st.sampled_from([4, 8]))
def test_crop_contains_best_center_and_meets_image(w, tau, k, conn):
    w[0, 0] += 1.0
    a = amap(w)
    cfg = ArpConfig(tau=tau, k=k, connectivity=conn, min_crop_px=56, pad_px=0)
    box = arp_crop(a, cfg)
    best = arp_regions(a, cfg)[0]
    assert point_in_box(best.center, box)
    assert box.x1 < a.grid.image_w and box.y1 < a.grid.image_h
    assert box.x2 > 0 and box.y2 > 0


@settings(max_examples=100)
@given(maps, st.sampled_from([2.0, 0.5, 8.0]))
def test_scaling_weights_changes_nothing(w, scale):
    # power-of-two scales keep every product and sum exact
    w[0, 0] += 1.0
    a, b = amap(w), amap(w * scale)
    cfg = ArpConfig()
    assert threshold_set(a, cfg.tau) == threshold_set(b, cfg.tau)
    assert [r.patches for r in arp_regions(a, cfg)] == [r.patches for r in arp_regions(b, cfg)]
    assert arp_crop(a, cfg) == arp_crop(b, cfg)


@settings(max_examples=100)
@given(hnp.arrays(float, st.tuples(st.integers(1, 10), st.integers(1, 10)),
                  elements=st.integers(0, 1000).map(float)),
       st.sampled_from([4, 8]))
def test_mirror_equivariance(w, conn):
    w[0, 0] += 1.0
    w = w + np.arange(w.size).reshape(w.shape) * 1e-3  # break score ties
    a = amap(w)
    cfg = ArpConfig(connectivity=conn, min_crop_px=28, pad_px=7)
    W, H = a.grid.image_w, a.grid.image_h
    box = arp_crop(a, cfg)
    hbox = arp_crop(amap(w[:, ::-1]), cfg)
    vbox = arp_crop(amap(w[::-1, :]), cfg)
    assert (hbox.x1, hbox.x2) == pytest.approx((W - box.x2, W - box.x1))
    assert (hbox.y1, hbox.y2) == pytest.approx((box.y1, box.y2))
    assert (vbox.y1, vbox.y2) == pytest.approx((H - box.y2, H - box.y1))


@settings(max_examples=100)
@given(maps, st.integers(1, 10), st.integers(0, 10))
def test_more_regions_never_shrink_center_box(w, k, extra):
    w[0, 0] += 1.0
    a = amap(w)
    small = centers_bbox([c.center for c in arp_regions(a, ArpConfig(k=k))])
    large = centers_bbox([c.center for c in arp_regions(a, ArpConfig(k=k + extra))])
    assert large.contains_box(small)


def test_config_validation():
    for bad in (dict(tau=0), dict(tau=1.5), dict(k=0), dict(connectivity=6),
                dict(min_crop_px=0), dict(pad_px=-1)):
        with pytest.raises(ValueError):
            ArpConfig(**bad)
