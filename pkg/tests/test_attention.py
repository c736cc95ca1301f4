"""Token mixers against a naive per-head numpy oracle, plus the bitwise
strip-vs-reference route equality and the shape/validation contracts."""

import numpy as np
import pytest

from s2aformer.attention import (Attention, AttnShapes, SpatialReduce,
                                 csr_spatial_reduce, generalized_attention,
                                 grid_for_tokens, mhsa_params, reference_mhsa,
                                 strip_attention, strip_params)
from s2aformer.errors import DimensionError, ParameterError
from s2aformer.rng import DATA_STREAM, INIT_STREAM, RngStream
from s2aformer.tensor import Tensor

import oracles


def strip_config(seed):
    """Deterministic small strip-attention config: n <= 64, d <= 32."""
    rng = RngStream(seed, DATA_STREAM)
    k = int(rng.integers(1, 3))
    d = 4 * int(rng.integers(1, 9))
    heads = (1, 2, 4)[int(rng.integers(0, 3))]
    side = k * int(rng.integers(1, 8 // k + 1))
    mode = "conv" if float(rng.uniform(())) < 0.5 else "pool"
    return k, d, heads, side, mode


def build_strip(seed):
    k, d, heads, side, mode = strip_config(seed)
    params = Attention(d, heads, RngStream(seed, INIT_STREAM), sr_ratio=k,
                       squeeze=True, sr_mode=mode, dtype=np.float64)
    x = RngStream(seed, DATA_STREAM).normal((side * side, d), dtype=np.float64)
    return params, x, (side, side)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(60))
    def test_strip_matches_naive_loop(self, seed):
        """Strip attention vs the per-head loop oracle, 1e-10 absolute in f64."""
        params, x, hw = build_strip(seed)
        out = strip_attention(Tensor(x), hw, params)
        ref = oracles.attention_ref(x, hw, params)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-10,
                                   err_msg="strip oracle mismatch, seed %d" % seed)

    @pytest.mark.parametrize("n,d,heads", [(9, 8, 1), (16, 12, 4), (25, 32, 2)])
    def test_full_width_matches_naive_loop(self, n, d, heads):
        """The unsqueezed path (with its sqrt scale) against the same oracle."""
        params = mhsa_params(d, heads, RngStream(1, INIT_STREAM), dtype=np.float64)
        x = RngStream(2, DATA_STREAM).normal((n, d), dtype=np.float64)
        out = reference_mhsa(Tensor(x), params)
        ref = oracles.attention_ref(x, grid_for_tokens(n, 1), params)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("n,d,heads", [(16, 8, 2), (49, 16, 4), (64, 32, 8)])
    def test_generalized_equals_reference_bitwise(self, n, d, heads):
        """squeeze=False, k=1 through both entry points on shared weights."""
        params = Attention(d, heads, RngStream(0, INIT_STREAM), sr_ratio=1,
                           squeeze=False)
        x = Tensor(RngStream(0, DATA_STREAM).normal((n, d)))
        via_generalized = generalized_attention(x, None, params)
        via_reference = reference_mhsa(x, params)
        assert via_generalized.dtype == via_reference.dtype
        np.testing.assert_array_equal(via_generalized.data, via_reference.data)


class TestSpatialReduce:
    @pytest.mark.parametrize("mode", ["conv", "pool"])
    @pytest.mark.parametrize("ratio,side", [(2, 4), (2, 6), (4, 8)])
    def test_matches_reference(self, mode, ratio, side):
        sr = SpatialReduce(6, ratio, RngStream(0, INIT_STREAM), mode=mode,
                           dtype=np.float64)
        x = RngStream(1, DATA_STREAM).normal((side * side, 6), dtype=np.float64)
        out = csr_spatial_reduce(Tensor(x), (side, side), sr)
        ref = oracles.spatial_reduce_ref(x, (side, side), sr)
        assert out.shape == ((side // ratio) ** 2, 6)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-10)

    def test_norm_off_skips_layer_norm(self):
        sr = SpatialReduce(4, 2, RngStream(0), mode="pool", norm=False,
                           dtype=np.float64)
        x = RngStream(1, DATA_STREAM).normal((16, 4), dtype=np.float64)
        out = csr_spatial_reduce(Tensor(x), (4, 4), sr)
        np.testing.assert_allclose(out.data,
                                   oracles.spatial_reduce_ref(x, (4, 4), sr),
                                   rtol=0, atol=1e-12)

    def test_grid_token_mismatch(self):
        sr = SpatialReduce(4, 2, RngStream(0))
        with pytest.raises(DimensionError):
            csr_spatial_reduce(Tensor(np.zeros((16, 4), np.float32)), (3, 4), sr)

    def test_width_mismatch(self):
        sr = SpatialReduce(4, 2, RngStream(0))
        with pytest.raises(DimensionError):
            csr_spatial_reduce(Tensor(np.zeros((16, 6), np.float32)), (4, 4), sr)

    def test_indivisible_grid(self):
        sr = SpatialReduce(4, 2, RngStream(0))
        with pytest.raises(DimensionError):
            csr_spatial_reduce(Tensor(np.zeros((12, 4), np.float32)), (3, 4), sr)

    @pytest.mark.parametrize("kwargs", [{"ratio": 1}, {"mode": "bilinear"}])
    def test_bad_construction(self, kwargs):
        full = {"dim": 4, "ratio": 2, "rng": RngStream(0), "mode": "conv"}
        full.update(kwargs)
        with pytest.raises(ParameterError):
            SpatialReduce(full["dim"], full["ratio"], full["rng"],
                          mode=full["mode"])


class TestAttentionProperties:
    @pytest.mark.parametrize("seed", range(8))
    def test_rows_sum_to_one_f32(self, seed):
        """Attention maps are softmax rows; each sums to 1 within 1e-6 in f32."""
        k, d, heads, side, mode = strip_config(seed)
        params = Attention(d, heads, RngStream(seed, INIT_STREAM), sr_ratio=k,
                           squeeze=True, sr_mode=mode)
        x = Tensor(RngStream(seed, DATA_STREAM).normal((side * side, d)))
        _, maps = strip_attention(x, (side, side), params, return_attn=True)
        assert len(maps) == heads
        for attn in maps:
            assert attn.shape == (side * side, (side // k) ** 2)
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_output_shape_preserved(self):
        params, x, hw = build_strip(3)
        out = strip_attention(Tensor(x), hw, params)
        assert out.shape == x.shape

    def test_strip_qk_width_is_one_per_head(self):
        params = strip_params(16, 4, 2, RngStream(0))
        assert params.wq.weight.shape == (16, 4)
        assert params.wk.weight.shape == (16, 4)
        assert params.wv.weight.shape == (16, 16)
        assert params.inv_scale == 1.0

    def test_full_width_scale(self):
        params = mhsa_params(16, 4, RngStream(0))
        assert params.wq.weight.shape == (16, 16)
        np.testing.assert_allclose(params.inv_scale, 0.5)

    def test_dropout_only_active_in_training(self):
        params = Attention(8, 2, RngStream(0), drop=0.5)
        x = Tensor(RngStream(1, DATA_STREAM).normal((16, 8)))
        plain = generalized_attention(x, None, params)
        trained = generalized_attention(x, None, params, training=True,
                                        rng=RngStream(0, 1))
        repeat = generalized_attention(x, None, params)
        np.testing.assert_array_equal(plain.data, repeat.data)
        assert not np.array_equal(plain.data, trained.data)


class TestGuards:
    def test_strip_entry_requires_squeeze(self):
        with pytest.raises(ParameterError):
            strip_attention(Tensor(np.zeros((4, 8), np.float32)), (2, 2),
                            mhsa_params(8, 2, RngStream(0)))

    def test_reference_entry_requires_full_width(self):
        x = Tensor(np.zeros((16, 8), np.float32))
        with pytest.raises(ParameterError):
            reference_mhsa(x, strip_params(8, 2, 1, RngStream(0)))
        with pytest.raises(ParameterError):
            reference_mhsa(x, Attention(8, 2, RngStream(0), sr_ratio=2,
                                        squeeze=False))

    def test_non_2d_input(self):
        params = mhsa_params(8, 2, RngStream(0))
        with pytest.raises(DimensionError):
            generalized_attention(Tensor(np.zeros((2, 4, 8), np.float32)),
                                  None, params)

    def test_width_mismatch(self):
        params = mhsa_params(8, 2, RngStream(0))
        with pytest.raises(DimensionError):
            generalized_attention(Tensor(np.zeros((4, 6), np.float32)),
                                  None, params)

    def test_reduction_needs_grid(self):
        params = strip_params(8, 2, 2, RngStream(0))
        with pytest.raises(ParameterError):
            generalized_attention(Tensor(np.zeros((16, 8), np.float32)),
                                  None, params)

    @pytest.mark.parametrize("dim,heads,kwargs", [
        (7, 2, {}), (8, 0, {}), (8, 2, {"sr_ratio": 0}), (8, 2, {"drop": 1.0}),
    ])
    def test_bad_attention_construction(self, dim, heads, kwargs):
        with pytest.raises(ParameterError):
            Attention(dim, heads, RngStream(0), **kwargs)


class TestShapeHelpers:
    @pytest.mark.parametrize("n,k,expect", [
        (16, 2, (4, 4)), (36, 3, (6, 6)), (7, 1, (1, 7)), (8, 2, (2, 4)),
        (50, 5, (5, 10)),
    ])
    def test_grid_for_tokens(self, n, k, expect):
        assert grid_for_tokens(n, k) == expect

    def test_grid_rejects_untileable(self):
        with pytest.raises(ParameterError):
            grid_for_tokens(8, 3)

    def test_attn_shapes_derive(self):
        shapes = AttnShapes.derive(64, 16, 4, 2)
        assert (shapes.n, shapes.ns, shapes.d, shapes.h, shapes.k) == (64, 16, 16, 4, 2)

    @pytest.mark.parametrize("args", [
        (16, 4, 16, 4, 3), (16, 16, 6, 4, 1), (0, 1, 4, 1, 1),
    ])
    def test_attn_shapes_validation(self, args):
        with pytest.raises(ParameterError):
            AttnShapes(*args)
