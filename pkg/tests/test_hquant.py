from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sqnet.hquant import (Stage, StageStack, compression_rate, hierarchical_quantize,
                          initial_allocation, kmeans2, quantize_model, reconstruct,
                          reconstruct_model)
from sqnet.nn import build_model

from conftest import lenet_toy
from oracles import best_contiguous_split, exact_sse, exact_variance_sse

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)


class TestKmeans2:
    def test_outlier_split(self):
        stage = kmeans2([1, 2, 3, 100])
        assert stage.centroids == (2.0, 100.0)
        assert list(stage.plane) == [False, False, False, True]
        assert stage.mse == 0.5
        sse, left = best_contiguous_split([1, 2, 3, 100])
        assert sse / 4 == Fraction(1, 2) and left == 3

    def test_all_equal(self):
        stage = kmeans2([5, 5, 5])
        assert stage.degenerate
        assert stage.centroids == (5.0, 5.0)
        assert not stage.plane.any()
        assert stage.mse == 0

    def test_two_points(self):
        stage = kmeans2([-1, 1])
        assert stage.centroids == (-1.0, 1.0) and stage.mse == 0

    def test_tie_goes_to_cluster_zero(self):
        # 0 is equidistant from the initial centroids -1 and 1
        stage = kmeans2([-1.0, 0.0, 1.0])
        assert list(stage.plane) == [False, False, True]
        assert stage.centroids == (-0.5, 1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            kmeans2([])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            kmeans2([0.0, np.nan])

    @pytest.mark.parametrize("values", [
        [1, 2, 3, 100],
        [0, 1, 4, 5],
        [-3, -2.5, -2, 7, 8, 8.5],
        [0.1, 0.2, 0.25, 0.9, 1.0],
        [1, 1, 1, 2],
        [-1, 0, 0, 1],
        [10, 0, 0, 0, 0, 0, 0, 0],
    ])
    def test_curated_equals_brute_force(self, values):
        stage = kmeans2(values)
        sse, _ = best_contiguous_split(values)
        # Lloyd's partition, scored at exact cluster means, is an optimal split
        left = [v for v, bit in zip(values, stage.plane) if not bit]
        right = [v for v, bit in zip(values, stage.plane) if bit]
        assert exact_variance_sse(left) + exact_variance_sse(right) == sse
        assert max(left) <= min(right)
        assert stage.mse == pytest.approx(float(sse) / len(values), rel=1e-12, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=finite))
    def test_bounded_by_optimum_and_variance(self, values):
        stage = kmeans2(values)
        got = exact_sse(values, stage.centroids, stage.plane)
        if stage.degenerate:
            assert got == 0
            return
        assert got >= best_contiguous_split(values)[0]
        assert got <= exact_variance_sse(values)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 64), elements=finite))
    def test_centroids_ordered_and_float32(self, values):
        stage = kmeans2(values)
        c0, c1 = stage.centroids
        assert c0 <= c1
        assert np.float32(c0) == c0 and np.float32(c1) == c1


class TestHierarchical:
    def test_hand_trace(self):
        stack = hierarchical_quantize([0, 1, 4, 5], 2)
        assert [s.centroids for s in stack.stages] == [(0.5, 4.5), (-0.5, 0.5)]
        assert stack.stages[-1].mse == 0
        np.testing.assert_array_equal(reconstruct(stack, 1), [0.5, 0.5, 4.5, 4.5])
        np.testing.assert_array_equal(reconstruct(stack, 2), [0, 1, 4, 5])

    def test_two_points_exact(self):
        stack = hierarchical_quantize([0, 4], 1)
        np.testing.assert_array_equal(reconstruct(stack), [0, 4])
        assert stack.stages[0].mse == 0

    def test_single_stage_is_kmeans2(self, rng):
        w = rng.normal(size=50)
        assert hierarchical_quantize(w, 1).stages == [kmeans2(w)]
        assert hierarchical_quantize(w, 1).stages[0].mse == kmeans2(w).mse

    def test_degenerate_stack(self):
        stack = hierarchical_quantize([5, 5, 5], 3)
        for k in range(1, 4):
            np.testing.assert_array_equal(reconstruct(stack, k), [5, 5, 5])

    def test_stage_count_validated(self):
        with pytest.raises(ValueError):
            hierarchical_quantize([1.0, 2.0], 0)

    def test_depth_validated(self):
        stack = hierarchical_quantize([1.0, 2.0, 3.0], 2)
        for k in (0, 3):
            with pytest.raises(ValueError):
                reconstruct(stack, k)

    def test_shape_kept(self, rng):
        stack = hierarchical_quantize(rng.normal(size=(3, 2, 2, 2)), 2)
        assert stack.original_shape == (3, 2, 2, 2) and stack.N == 24

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 300), elements=finite), st.integers(1, 8))
    def test_mse_non_increasing(self, values, n):
        stack = hierarchical_quantize(values, n)
        mses = [s.mse for s in stack.stages]
        assert all(b <= a for a, b in zip(mses, mses[1:]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 300), elements=finite), st.integers(1, 8),
           st.data())
    def test_prefix_property(self, values, n, data):
        k = data.draw(st.integers(1, n))
        deep = hierarchical_quantize(values, n)
        shallow = hierarchical_quantize(values, k)
        assert reconstruct(deep, k).tobytes() == reconstruct(shallow).tobytes()
        assert deep.truncated(k) == shallow

    def test_reconstruction_error_shrinks(self, rng):
        w = rng.normal(size=2000)
        stack = hierarchical_quantize(w, 8)
        errs = [np.mean((w - reconstruct(stack, k)) ** 2) for k in range(1, 9)]
        assert all(b <= a for a, b in zip(errs, errs[1:]))
        assert errs[-1] < errs[0]
        np.testing.assert_allclose(errs, [s.mse for s in stack.stages], rtol=1e-9)


class TestCompressionRate:
    def test_hand_arithmetic(self):
        rep = compression_rate(1000, 4, 32)
        assert rep.ratio == Fraction(32000, 4256)
        assert rep.index_bits == 4000 and rep.centroid_bits == 256
        assert rep.conventional_ratio == Fraction(32000, 4000 + 16 * 32)

    def test_fixed_point(self):
        # N*n + 2nb == N*b for N=64, n=16, b=32
        assert compression_rate(64, 16, 32).ratio == 1

    def test_table_ratio(self):
        assert round(1720 / 200, 2) == 8.60

    def test_rejects_non_positive(self):
        for args in [(0, 1, 32), (10, 0, 32), (10, 1, 0), (10, 1.5, 32)]:
            with pytest.raises(ValueError):
                compression_rate(*args)


class TestModelQuantization:
    def test_default_allocation_lenet(self):
        assert initial_allocation(lenet_toy(), 8, 5) == [8, 8, 5, 5]

    def test_default_allocation_alexnet_shape(self):
        arch = [("conv2d", 2, 2), ("relu",)] * 5 + [("flatten",), ("dense", 4), ("relu",),
                                                     ("dense", 4), ("relu",), ("dense", 3)]
        m = build_model(arch, (1, 12, 12))
        assert initial_allocation(m, 10, 5) == [10, 10, 10, 10, 10, 5, 5, 5]

    def test_all_ones_is_base_layer(self, trained_mlp):
        stacks = quantize_model(trained_mlp, [1, 1])
        for s, layer in zip(stacks, trained_mlp.weighted_layers()):
            assert s.n == 1
            assert len(np.unique(reconstruct(s))) <= 2
            assert s.stages[0] == kmeans2(layer.weights)

    def test_length_mismatch(self, trained_mlp):
        with pytest.raises(ValueError):
            quantize_model(trained_mlp, [3])

    def test_deterministic(self, trained_conv):
        a = quantize_model(trained_conv, [3, 3, 2, 2])
        b = quantize_model(trained_conv, [3, 3, 2, 2])
        assert a == b

    def test_biases_untouched(self, trained_conv):
        stacks = quantize_model(trained_conv, [2, 2, 2, 2])
        q = reconstruct_model(trained_conv, stacks)
        for a, b in zip(trained_conv.weighted_layers(), q.weighted_layers()):
            assert np.array_equal(a.bias, b.bias)
            assert not np.array_equal(a.weights, b.weights)


def test_stage_equality_ignores_mse():
    a = Stage((0.0, 1.0), [0, 1], mse=0.3)
    b = Stage((0.0, 1.0), [0, 1])
    assert a == b
    assert StageStack(0, [a], (2,)) == StageStack(0, [b], (2,))
