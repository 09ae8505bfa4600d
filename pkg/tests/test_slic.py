import numpy as np
import pytest
from sklearn.base import clone

from supw.imaging import rgb_to_lab
from supw.slic import (SlicParams, SlicSuperpixels, SuperpixelGrid, boundary_recall,
                       enforce_connectivity, init_centers, isoperimetric_quotients, overlay,
                       slic_distance, slic_image, slic_run)
from supw.synthdata import SOURCE, TARGET, gen_sample

from oracles import flood_fill_connected


def quadrant_image(n=64):
    img = np.zeros((n, n, 3))
    h = n // 2
    img[:h, :h] = [0.9, 0.1, 0.1]
    img[:h, h:] = [0.1, 0.8, 0.1]
    img[h:, :h] = [0.1, 0.1, 0.9]
    img[h:, h:] = [0.9, 0.9, 0.2]
    return img


@pytest.fixture(scope="module")
def natural():
    return gen_sample(SOURCE, 128, 5)[0]


class TestInitCenters:
    def test_grid_256(self):
        c = init_centers(np.zeros((256, 256, 3)), 256)
        assert len(c) == 256
        ys = np.unique(c[:, 3])
        assert len(ys) == 16
        np.testing.assert_allclose(np.diff(ys), 16.0)

    def test_single_center_in_middle(self):
        c = init_centers(np.zeros((60, 60, 3)), 1)
        assert len(c) == 1
        assert abs(c[0, 3] - 29.5) <= 1 and abs(c[0, 4] - 29.5) <= 1
        # a non-square image may round up to one extra cell
        assert 1 <= len(init_centers(np.zeros((100, 60, 3)), 1)) <= 3

    def test_flat_image_stays_on_grid(self):
        lab = np.full((48, 48, 3), 40.0)
        c = init_centers(lab, 9)
        np.testing.assert_array_equal(np.unique(c[:, 3]), [7.5, 23.5, 39.5])

    def test_moves_off_edges(self):
        img = np.zeros((30, 30, 3))
        img[:, 15:] = 1.0  # vertical edge at the seed column
        c = init_centers(rgb_to_lab(img), 1)
        grad_col = int(c[0, 4])
        assert grad_col not in (14, 15)

    @pytest.mark.parametrize("h,w,k", [(64, 64, 10), (100, 80, 37), (128, 128, 500), (33, 47, 7), (256, 256, 1000)])
    def test_count_bounds(self, h, w, k):
        n = len(init_centers(np.zeros((h, w, 3)), k))
        assert k <= n <= k + 2 * np.sqrt(k) + 1e-9

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            init_centers(np.zeros((4, 4, 3)), 17)


class TestDistance:
    def test_colour_only(self):
        assert slic_distance([3, 0, 0, 5, 5], [0, 0, 0, 5, 5], 10, 4) == 3.0

    def test_spatial_only(self):
        assert slic_distance([0, 0, 0, 4, 0], [0, 0, 0, 0, 0], 40, 4) == pytest.approx(40.0)

    def test_mixed(self):
        assert slic_distance([3, 0, 0, 4, 0], [0, 0, 0, 0, 0], 2, 4) == pytest.approx(np.sqrt(13), abs=1e-4)
        assert slic_distance([3, 0, 0, 4, 0], [0, 0, 0, 0, 0], 2, 4) == pytest.approx(3.6056, abs=1e-4)

    def test_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dc, ds, m, s = rng.uniform(0, 10, 4) + 0.1
            d = slic_distance([dc, 0, 0, ds, 0], [0] * 5, m, s)
            assert slic_distance([dc + 1, 0, 0, ds, 0], [0] * 5, m, s) > d
            assert slic_distance([dc, 0, 0, ds + 1, 0], [0] * 5, m, s) > d


class TestSlicRun:
    def test_flat_image_regular_regions(self):
        g = slic_image(np.full((64, 64, 3), 0.4), SlicParams(k=16, m=10))
        assert g.num_regions == 16
        assert np.all(np.abs(g.region_sizes - 256) <= 25.6)

    def test_quadrants_boundary_recall(self):
        img = quadrant_image()
        g = slic_image(img, SlicParams(k=4, m=1))
        # brute force: every quadrant is a single label and the four differ
        quads = [g.labels[:32, :32], g.labels[:32, 32:], g.labels[32:, :32], g.labels[32:, 32:]]
        assert all(len(np.unique(q)) == 1 for q in quads)
        assert len({int(q[0, 0]) for q in quads}) == 4
        gt = (np.arange(64)[:, None] >= 32) * 2 + (np.arange(64)[None, :] >= 32)
        assert boundary_recall(g.labels, gt) == 1.0

    def test_one_region_per_pixel(self):
        img = np.random.default_rng(0).random((6, 7, 3))
        g = slic_image(img, SlicParams(k=42, m=10, max_iter=0))
        assert g.num_regions == 42
        assert np.all(g.region_sizes == 1)

    def test_partition_and_connectivity(self, natural):
        g = slic_image(natural, SlicParams(k=150, m=30))
        assert g.labels.min() == 0 and g.labels.max() == g.num_regions - 1
        assert g.region_sizes.sum() == natural.shape[0] * natural.shape[1]
        assert np.all(g.region_sizes > 0)
        assert flood_fill_connected(g.labels)

    def test_deterministic(self, natural):
        p = SlicParams(k=100, m=20)
        np.testing.assert_array_equal(slic_image(natural, p).labels, slic_image(natural, p).labels)

    @pytest.mark.parametrize("k", [50, 150, 500, 1000])
    def test_region_count(self, natural, k):
        g = slic_image(natural, SlicParams(k=k, m=50))
        assert 0.5 * k <= g.num_regions <= 1.5 * k

    def test_compactness_monotone(self, natural):
        q = [isoperimetric_quotients(slic_image(natural, SlicParams(k=150, m=m)).labels).mean()
             for m in (20, 30, 50)]
        assert q[0] <= q[1] <= q[2]

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            SlicParams(k=0)
        with pytest.raises(ValueError):
            SlicParams(m=0)


class TestConnectivity:
    def test_disconnected_label_is_split(self):
        labels = np.zeros((6, 6), dtype=int)
        labels[:, 2:4] = 1  # label 0 split into two halves
        g = enforce_connectivity(labels, min_size=1)
        assert g.num_regions == 3
        assert flood_fill_connected(g.labels)

    def test_small_fragment_joins_largest_neighbour(self):
        labels = np.zeros((8, 8), dtype=int)
        labels[:, 5:] = 1
        labels[3, 4] = 2  # touches region 0 (left, 3 neighbours) and 1 (right)
        g = enforce_connectivity(labels, min_size=2)
        assert g.num_regions == 2
        assert g.labels[3, 4] == g.labels[0, 0]  # region 0 is larger (32 px vs 24)

    def test_raster_order_labels(self):
        labels = np.array([[5, 5, 2], [5, 5, 2], [7, 7, 7]])
        np.testing.assert_array_equal(enforce_connectivity(labels, 0).labels,
                                      [[0, 0, 1], [0, 0, 1], [2, 2, 2]])


class TestOverlay:
    def test_single_region_unchanged(self):
        img = np.random.default_rng(0).random((10, 10, 3))
        out = overlay(img, SuperpixelGrid(np.zeros((10, 10), dtype=int), 1))
        np.testing.assert_array_equal(out[1:-1, 1:-1], img[1:-1, 1:-1])
        assert out.shape == img.shape

    def test_cross(self):
        gt = (np.arange(8)[:, None] >= 4) * 2 + (np.arange(8)[None, :] >= 4)
        out = overlay(np.zeros((8, 8, 3)), SuperpixelGrid(gt, 4))
        red = out[..., 0] == 1.0
        expected = np.zeros((8, 8), dtype=bool)
        expected[3:5, :] = True
        expected[:, 3:5] = True
        np.testing.assert_array_equal(red, expected)

    def test_dims_checked(self):
        with pytest.raises(ValueError):
            overlay(np.zeros((4, 4, 3)), SuperpixelGrid(np.zeros((5, 4), dtype=int), 1))


class TestEstimator:
    def test_params_and_clone(self):
        est = SlicSuperpixels(n_segments=64, compactness=20)
        assert est.get_params()["n_segments"] == 64
        assert clone(est).get_params() == est.get_params()

    def test_transform_stack(self):
        imgs = np.stack([gen_sample(SOURCE, 32, 0)[0], gen_sample(TARGET, 32, 0)[0]])
        labels = SlicSuperpixels(n_segments=16, compactness=20).fit_transform(imgs)
        assert labels.shape == (2, 32, 32)
        single = SlicSuperpixels(n_segments=16, compactness=20).fit(imgs).transform(imgs[0])
        np.testing.assert_array_equal(single, labels[0])

    def test_bad_param_raises_on_fit(self):
        with pytest.raises(ValueError):
            SlicSuperpixels(n_segments=0).fit(np.zeros((1, 8, 8, 3)))


def test_slic_run_accepts_lab_directly():
    img = quadrant_image(32)
    a = slic_run(rgb_to_lab(img), SlicParams(k=4, m=1)).labels
    b = slic_image(img, SlicParams(k=4, m=1)).labels
    np.testing.assert_array_equal(a, b)
