import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bitbudget.errors import ParameterError
from bitbudget.model import ModuleId
from bitbudget.quant import bitset, build_pool, quantize_rtn


class TestRTN:
    def test_two_bit_example(self):
        # qmax = 1, scale = 1; -0.5 rounds half-to-even to 0
        np.testing.assert_array_equal(quantize_rtn([1.0, -0.5, 0.25, 0.0], 2, 4), [1.0, 0.0, 0.0, 0.0])

    def test_three_bit_example(self):
        # qmax = 3, scale = 1/3: levels [3, -1.5 -> -2, 0.75 -> 1, 0]
        np.testing.assert_allclose(quantize_rtn([1.0, -0.5, 0.25, 0.0], 3, 4), [1.0, -2 / 3, 1 / 3, 0.0])

    def test_groups_have_independent_scales(self):
        w = np.array([[4.0, 1.0, 0.1, 0.05]])
        np.testing.assert_allclose(quantize_rtn(w, 2, 2), [[4.0, 0.0, 0.1, 0.0]])

    def test_short_trailing_group(self):
        w = np.array([1.0, 0.4, 0.3])
        np.testing.assert_allclose(quantize_rtn(w, 3, 2), [1.0, 1 / 3, 0.3])

    def test_zero_group(self):
        np.testing.assert_array_equal(quantize_rtn(np.zeros((2, 4)), 4, 4), np.zeros((2, 4)))

    @pytest.mark.parametrize("bits,group", [(1, 4), (2.5, 4), (3, 0)])
    def test_invalid(self, bits, group):
        with pytest.raises(ParameterError):
            quantize_rtn(np.ones(4), bits, group)

    @given(arrays(np.float64, (3, 20), elements=st.floats(-10, 10)), st.sampled_from([2, 3, 4, 8]))
    def test_properties(self, w, bits):
        q = quantize_rtn(w, bits, 16)
        qmax = 2 ** (bits - 1) - 1
        assert q.shape == w.shape
        # idempotent and never exceeds the group max magnitude
        np.testing.assert_allclose(quantize_rtn(q, bits, 16), q, atol=1e-12)
        for start in (0, 16):
            g, gq = w[:, start:start + 16], q[:, start:start + 16]
            amax = np.abs(g).max(axis=1, keepdims=True)
            assert np.all(np.abs(gq) <= amax + 1e-12)
            # error per entry is at most half a step
            assert np.all(np.abs(gq - g) <= amax / qmax / 2 + 1e-12)

    def test_error_decreases_with_bits(self):
        w = np.random.default_rng(0).normal(size=(64, 64))
        errs = [np.square(quantize_rtn(w, b) - w).sum() for b in (2, 3, 4, 8)]
        assert errs == sorted(errs, reverse=True)


class TestPool:
    def test_bitset(self):
        assert bitset([4, 2, 3]) == (2, 3, 4)
        for bad in ([3], [2, 2], [1, 2]):
            with pytest.raises(ParameterError):
                bitset(bad)

    def test_structure(self, tiny_model, tiny_pool):
        assert tiny_pool.module_ids() == tiny_model.spec.module_ids()
        assert tiny_pool.num_entries() == 7 * 3
        m = ModuleId(1, "gate")
        np.testing.assert_array_equal(tiny_pool.candidate(m, 3), quantize_rtn(tiny_model.weights[m], 3, 16))
        assert tiny_pool.spec_hash == tiny_model.spec.spec_hash()

    def test_read_only(self, tiny_pool):
        with pytest.raises(ValueError):
            tiny_pool.candidates[ModuleId(1, "q")][0, 0, 0] = 0.0

    def test_error_tables(self, tiny_pool):
        for m, errs in tiny_pool.squared_errors().items():
            assert np.all(np.diff(errs) < 0)
            np.testing.assert_allclose(tiny_pool.mse_table()[m], errs / tiny_pool.full_precision[m].size)

    def test_weight_map(self, tiny_model, tiny_pool):
        m = ModuleId(1, "v")
        w = tiny_pool.weight_map({m: 2})
        np.testing.assert_array_equal(w[m], tiny_pool.candidate(m, 2))
        np.testing.assert_array_equal(w[ModuleId(1, "q")], tiny_model.weights[ModuleId(1, "q")])

    def test_rebuild_is_identical(self, tiny_model, tiny_pool):
        again = build_pool(tiny_model, (2, 3, 4), 16)
        for m in tiny_pool.module_ids():
            np.testing.assert_array_equal(again.candidates[m], tiny_pool.candidates[m])


class TestWorkedExamples:
    def test_three_entry_group(self):
        np.testing.assert_array_equal(quantize_rtn([1.0, -1.0, 0.4], 2, 3), [1.0, -1.0, 0.0])

    def test_on_grid_is_fixed_point(self):
        w = np.array([0.7, -0.7 / 7 * 3, 0.0, 0.1 * 7 / 7])
        grid = quantize_rtn(w, 4, 4)
        np.testing.assert_array_equal(quantize_rtn(grid, 4, 4), grid)

    def test_odd_symmetry_without_ties(self):
        w = np.random.default_rng(1).normal(size=(8, 32))
        np.testing.assert_array_equal(quantize_rtn(-w, 3), -quantize_rtn(w, 3))

    def test_pool_entry_count(self, two_layer_model):
        pool = build_pool(two_layer_model, (2, 3, 4))
        assert pool.num_entries() == 2 * 7 * 3
        for m in pool.module_ids():
            assert pool.candidates[m].shape[1:] == two_layer_model.weights[m].shape

    def test_mse_table_recomputed(self, tiny_model, tiny_pool):
        for m in tiny_pool.module_ids():
            w = tiny_model.weights[m]
            expected = [np.mean((quantize_rtn(w, b, 16) - w) ** 2) for b in (2, 3, 4)]
            np.testing.assert_allclose(tiny_pool.mse_table()[m], expected, rtol=1e-12)
