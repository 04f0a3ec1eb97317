import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from a3dfdg.errors import UndefinedMetricError
from a3dfdg.metrics import MetricTable, asd, dsc, evaluate_model, evaluate_predictions, surface
from a3dfdg.phantom import LabeledVolume
from a3dfdg.segmodel import zeros_model
from a3dfdg.volume import Volume

from oracles import brute_asd, surface_voxels


def mask_pairs(max_side=8):
    shapes = st.tuples(*[st.integers(1, max_side)] * 3)
    return shapes.flatmap(lambda s: st.tuples(arrays(bool, s), arrays(bool, s)))


class TestDSC:
    def test_examples(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, :4] = True
        b[0, 0, 2:4] = True
        b[1, 0, :2] = True
        assert dsc(a, a) == 1.0
        assert dsc(a, b) == pytest.approx(0.5)
        c = np.zeros_like(a)
        c[3, 3, 3] = True
        assert dsc(a, c) == 0.0

    def test_empty_conventions(self):
        empty = np.zeros((3, 3, 3), bool)
        full = np.ones((3, 3, 3), bool)
        assert dsc(empty, empty) == 1.0
        assert dsc(empty, full) == 0.0 and dsc(full, empty) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dsc(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=200)
    @given(mask_pairs())
    def test_symmetry_and_range(self, pair):
        a, b = pair
        assert dsc(a, b) == dsc(b, a)
        assert 0.0 <= dsc(a, b) <= 1.0
        if a.any():
            assert dsc(a, a) == 1.0

    @settings(max_examples=50)
    @given(mask_pairs(), st.integers(0, 2 ** 32 - 1))
    def test_permutation_invariance(self, pair, seed):
        a, b = pair
        perm = np.random.default_rng(seed).permutation(a.size)
        assert dsc(a.ravel()[perm].reshape(a.shape), b.ravel()[perm].reshape(b.shape)) == dsc(a, b)


class TestSurface:
    def test_solid_cube(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        s = surface(m)
        assert s.sum() == 26 and not s[2, 2, 2]

    def test_border_counts_as_background(self):
        m = np.ones((3, 3, 3), bool)
        assert surface(m).sum() == 26

    @settings(max_examples=100)
    @given(mask_pairs(6))
    def test_matches_loop_oracle(self, pair):
        a, _ = pair
        expected = np.zeros_like(a)
        for idx in surface_voxels(a):
            expected[idx] = True
        np.testing.assert_array_equal(surface(a), expected)


class TestASD:
    def test_identical(self):
        m = np.zeros((6, 6, 6), bool)
        m[1:4, 2:5, 0:3] = True
        assert asd(m, m) == 0.0

    def test_single_voxels_three_apart(self):
        a = np.zeros((8, 8, 8), bool)
        b = np.zeros((8, 8, 8), bool)
        a[1, 4, 4] = True
        b[4, 4, 4] = True
        assert asd(a, b) == pytest.approx(3.0)

    def test_parallel_plates(self):
        a = np.zeros((6, 6, 6), bool)
        b = np.zeros((6, 6, 6), bool)
        a[1] = True
        b[3] = True
        assert asd(a, b) == pytest.approx(2.0)
        assert asd(a, b) == pytest.approx(brute_asd(a, b))

    def test_anisotropic_spacing(self):
        a = np.zeros((8, 8, 8), bool)
        b = np.zeros((8, 8, 8), bool)
        a[2, 2, 2] = True
        b[2, 2, 5] = True
        assert asd(a, b, (1.0, 1.0, 2.5)) == pytest.approx(7.5)

    def test_empty_mask_undefined(self):
        a = np.zeros((4, 4, 4), bool)
        b = a.copy()
        b[1, 1, 1] = True
        with pytest.raises(UndefinedMetricError):
            asd(a, b)
        with pytest.raises(UndefinedMetricError):
            asd(b, a)

    @settings(max_examples=100)
    @given(mask_pairs(10), st.tuples(*[st.sampled_from([0.5, 1.0, 1.5])] * 3))
    def test_matches_brute_force(self, pair, spacing):
        a, b = pair
        if not a.any() or not b.any():
            return
        assert asd(a, b, spacing) == pytest.approx(brute_asd(a, b, spacing), abs=1e-6)

    @settings(max_examples=200)
    @given(mask_pairs())
    def test_symmetry(self, pair):
        a, b = pair
        if not a.any() or not b.any():
            return
        assert asd(a, b) == asd(b, a)
        assert asd(a, a) == 0.0


class TestAggregation:
    def test_macro_mean(self):
        labels = np.zeros((10, 10, 10), np.uint8)
        for c in range(1, 6):
            labels[2 * c - 2:2 * c, :, :] = c
        table = evaluate_predictions([(labels, labels, (1, 1, 1))], range(1, 6))
        assert table.dsc == {c: 100.0 for c in range(1, 6)}
        assert table.asd == {c: 0.0 for c in range(1, 6)}
        assert table.global_dsc == 100.0 and table.global_asd == 0.0

    def test_global_is_unweighted_organ_mean(self):
        t = MetricTable(dsc={1: 90, 2: 80, 3: 70, 4: 60, 5: 50})
        assert np.mean(list(t.dsc.values())) == 70.0

    def test_organ_averaged_over_volumes_that_contain_it(self):
        gt_a = np.zeros((6, 6, 6), np.uint8)
        gt_a[:2] = 1
        gt_a[4:] = 2
        gt_b = np.zeros((6, 6, 6), np.uint8)
        gt_b[:2] = 1
        pred_b = np.zeros_like(gt_b)
        table = evaluate_predictions([(gt_a, gt_a, (1, 1, 1)), (pred_b, gt_b, (1, 1, 1))], [1, 2, 3])
        assert table.dsc == {1: 50.0, 2: 100.0}
        assert table.missing_asd == {1: 1}
        assert table.asd == {1: 0.0, 2: 0.0}
        assert table.global_dsc == 75.0

    def test_uniform_model_predicts_background(self):
        labels = np.zeros((6, 6, 6), np.uint8)
        labels[:3] = 1
        item = LabeledVolume(Volume(np.zeros((6, 6, 6), np.float32)), labels)
        table = evaluate_model(zeros_model(2), [item])
        assert table.dsc == {1: 0.0}
        assert table.missing_asd == {1: 1}

    def test_row_layout(self):
        t = MetricTable(dsc={1: 50.0}, asd={1: 2.0}, global_dsc=50.0, global_asd=2.0)
        row = t.row([1, 2], "in_")
        assert list(row) == ["in_dsc_1", "in_dsc_2", "in_asd_1", "in_asd_2", "in_global_dsc", "in_global_asd"]
        assert np.isnan(row["in_dsc_2"])
