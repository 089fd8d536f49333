import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from omsn.postprocess import (FAZ, VESSEL, MorphologyConfig, PostprocessConfig, ThresholdConfig,
                              binarize_probability, decode_labels, fill_small_holes,
                              gaussian_adaptive_threshold, one_hot_encode, remove_small_objects)

from oracles import flood_components, ref_fill, ref_remove

masks = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(lambda w: hnp.arrays(bool, (h, w))))


class TestThreshold:
    def test_constant_is_background(self):
        assert not gaussian_adaptive_threshold(np.full((20, 20), 0.4)).any()

    def test_bright_pixel(self):
        img = np.zeros((21, 21))
        img[10, 10] = 1.0
        out = gaussian_adaptive_threshold(img)
        assert out[10, 10] == 1 and out.sum() == 1

    def test_binary_output(self, rng):
        out = gaussian_adaptive_threshold(rng.random((30, 30)))
        assert set(np.unique(out)) <= {0, 1}

    def test_window_too_large(self):
        with pytest.raises(ValueError, match="window"):
            gaussian_adaptive_threshold(np.zeros((4, 4)), ThresholdConfig(window=11))

    def test_non_finite(self):
        img = np.zeros((20, 20))
        img[0, 0] = np.nan
        with pytest.raises(ValueError):
            gaussian_adaptive_threshold(img)

    @pytest.mark.parametrize("window", [2, 1, 4])
    def test_window_must_be_odd(self, window):
        with pytest.raises(ValueError):
            ThresholdConfig(window=window)

    def test_default_sigma(self):
        assert ThresholdConfig().effective_sigma == pytest.approx(11 / 6)

    def test_confident_plateau_kept(self):
        p = np.zeros((30, 30))
        p[5:25, 5:25] = 0.9
        assert binarize_probability(p)[5:25, 5:25].all()

    def test_faint_ridge_recovered(self):
        p = np.full((30, 30), 0.1)
        p[:, 15] = 0.4
        out = binarize_probability(p)
        assert out[:, 15].all() and out.sum() == 30


class TestRemoveSmallObjects:
    def test_isolated_pixel(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        assert not remove_small_objects(m, MorphologyConfig(2, 1)).any()

    def test_diagonal_pair_kept(self):
        m = np.zeros((5, 5), bool)
        m[1, 1] = m[2, 2] = True
        np.testing.assert_array_equal(remove_small_objects(m, MorphologyConfig(2, 1)), m)

    def test_size_one_identity(self, rng):
        m = rng.random((8, 8)) < 0.3
        np.testing.assert_array_equal(remove_small_objects(m, MorphologyConfig(1, 1)), m)

    @settings(max_examples=150, deadline=None)
    @given(masks, st.integers(1, 8))
    def test_matches_flood_fill(self, m, size):
        got = remove_small_objects(m, MorphologyConfig(size, 1)).astype(bool)
        np.testing.assert_array_equal(got, ref_remove(m, size))
        assert all(len(c) >= size for c in flood_components(got))
        assert not (got & ~m).any()
        np.testing.assert_array_equal(remove_small_objects(got, MorphologyConfig(size, 1)), got)


class TestFillSmallHoles:
    def test_ring_center(self):
        m = np.ones((3, 3), bool)
        m[1, 1] = False
        padded = np.pad(m, 1)
        out = fill_small_holes(padded, MorphologyConfig(1, 2))
        assert out[2, 2] == 1

    def test_border_region_never_filled(self):
        m = np.ones((6, 6), bool)
        m[0, 2] = False
        out = fill_small_holes(m, MorphologyConfig(1, 100))
        assert out[0, 2] == 0

    def test_size_one_identity(self, rng):
        m = rng.random((8, 8)) < 0.7
        np.testing.assert_array_equal(fill_small_holes(m, MorphologyConfig(1, 1)), m)

    @settings(max_examples=150, deadline=None)
    @given(masks, st.integers(1, 8))
    def test_matches_flood_fill(self, m, size):
        got = fill_small_holes(m, MorphologyConfig(1, size)).astype(bool)
        np.testing.assert_array_equal(got, ref_fill(m, size))
        assert not (m & ~got).any()
        np.testing.assert_array_equal(fill_small_holes(got, MorphologyConfig(1, size)), got)


class TestOneHot:
    def test_small_map(self):
        out = one_hot_encode(np.array([[0, 1], [2, 0]]), 3)
        assert out.shape == (3, 2, 2)
        np.testing.assert_array_equal(out.sum(axis=0), 1)
        np.testing.assert_array_equal(out[2], [[0, 0], [1, 0]])

    def test_all_background(self):
        out = one_hot_encode(np.zeros((4, 4), int), 3)
        assert out[0].all() and not out[1:].any()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_hot_encode(np.array([[3]]), 3)


class TestDecode:
    def large_region_map(self):
        lab = np.zeros((40, 40), np.uint8)
        lab[5:15, :] = VESSEL
        lab[22:34, 20:34] = FAZ
        return lab

    def test_one_hot_roundtrip(self):
        lab = self.large_region_map()
        np.testing.assert_array_equal(decode_labels(one_hot_encode(lab).astype(float)), lab)

    def test_synthetic_roundtrip(self, synth_small):
        for s in synth_small:
            np.testing.assert_array_equal(decode_labels(one_hot_encode(s.labels).astype(float)), s.labels)

    def test_all_zero(self):
        assert not decode_labels(np.zeros((3, 20, 20))).any()

    def test_faz_wins(self):
        p = np.zeros((3, 20, 20))
        p[1, 5:15, 5:15] = 1
        p[2, 5:15, 5:15] = 1
        assert (decode_labels(p)[5:15, 5:15] == FAZ).all()

    def test_single_task_channel(self):
        p = np.zeros((1, 20, 20))
        p[0, 5:15, 5:15] = 0.9
        out = decode_labels(p, PostprocessConfig(), channel_classes=[FAZ])
        assert set(np.unique(out)) == {0, FAZ}

    def test_bad_channel_map(self):
        with pytest.raises(ValueError):
            decode_labels(np.zeros((3, 20, 20)), channel_classes=[1])
