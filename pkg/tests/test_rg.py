"""Relationship-guidance block: kernel pooling, correlation identities, cost."""

import numpy as np
import pytest

from oredet import tensor as T
from oredet import rg
from oredet.backbone import FeaturePyramid
from oredet.config import ModelConfig
from oracles import adaptive_avg_pool_oracle, depthwise_xcorr_oracle


def _params(c=8, seed=0):
    return rg.RGParams(ModelConfig(channels=c), np.random.default_rng(seed))


class TestBuildKernels:
    def test_constant_support_gives_constant_kernels(self):
        v = 3.25
        sup = T.tensor(np.full((4, 6, 6), v, np.float32))
        k = rg.build_kernels(sup)
        for kern in (k.k1, k.k31, k.k13):
            np.testing.assert_allclose(kern.data, v, atol=1e-6)

    def test_k1_is_mean_of_k31_when_divisible(self, rng):
        sup = T.tensor(rng.standard_normal((4, 9, 6)).astype(np.float32))
        k = rg.build_kernels(sup)
        np.testing.assert_allclose(k.k1.data[:, 0, 0], k.k31.data.mean(axis=(1, 2)), atol=1e-6)

    def test_matches_window_partition_oracle(self):
        rng = np.random.default_rng(21)
        sup = rng.standard_normal((64, 8, 8))
        k = rg.build_kernels(T.tensor(sup))
        # same windows; summation order differs from the loop oracle
        np.testing.assert_allclose(k.k1.data, adaptive_avg_pool_oracle(sup, 1, 1), atol=1e-12)
        np.testing.assert_allclose(k.k31.data, adaptive_avg_pool_oracle(sup, 3, 1), atol=1e-12)
        np.testing.assert_allclose(k.k13.data, adaptive_avg_pool_oracle(sup, 1, 3), atol=1e-12)

    def test_small_support_rejected(self):
        with pytest.raises(ValueError):
            rg.build_kernels(T.zeros((4, 2, 5)))


class TestSpatialScaleCorrelation:
    def test_zero_support_is_identity(self, rng):
        q = rng.standard_normal((4, 7, 7)).astype(np.float32)
        k = rg.build_kernels(T.zeros((4, 5, 5)))
        out = rg.spatial_scale_correlation(k, T.tensor(q))
        np.testing.assert_array_equal(out.data, q)

    def test_unit_k1_zero_strips_doubles_query(self, rng):
        q = rng.standard_normal((3, 5, 5)).astype(np.float32)
        k = rg.SupportKernels(
            k1=T.tensor(np.ones((3, 1, 1), np.float32)),
            k31=T.zeros((3, 3, 1)),
            k13=T.zeros((3, 1, 3)),
        )
        out = rg.spatial_scale_correlation(k, T.tensor(q))
        np.testing.assert_allclose(out.data, 2 * q, atol=1e-6)

    def test_matches_padded_loop_oracle(self):
        rng = np.random.default_rng(31)
        q = rng.standard_normal((3, 6, 5))
        sup = rng.standard_normal((3, 8, 8))
        k = rg.build_kernels(T.tensor(sup))
        out = rg.spatial_scale_correlation(k, T.tensor(q))
        expect = (q
                  + depthwise_xcorr_oracle(q, k.k1.data)
                  + depthwise_xcorr_oracle(depthwise_xcorr_oracle(q, k.k31.data), k.k13.data))
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    def test_response_scaling_with_support(self, rng):
        # each correlation is bilinear in its kernel: the 1x1 response scales
        # with the support, the composed strip pair scales with its square
        q = T.tensor(rng.standard_normal((4, 6, 6)).astype(np.float32))
        sup = rng.standard_normal((4, 8, 8)).astype(np.float32)
        k = rg.build_kernels(T.tensor(sup))
        k3 = rg.build_kernels(T.tensor(3.0 * sup))
        q1 = T.depthwise_xcorr(q, k.k1)
        q1_scaled = T.depthwise_xcorr(q, k3.k1)
        np.testing.assert_allclose(q1_scaled.data, 3.0 * q1.data, rtol=1e-4, atol=1e-4)
        qs = T.depthwise_xcorr(T.depthwise_xcorr(q, k.k31), k.k13)
        qs_scaled = T.depthwise_xcorr(T.depthwise_xcorr(q, k3.k31), k3.k13)
        np.testing.assert_allclose(qs_scaled.data, 9.0 * qs.data, rtol=1e-3, atol=1e-3)


class TestChannelCorrelation:
    def test_passthrough_weight_configuration(self, rng):
        c = 4
        params = _params(c)
        w = np.zeros((c, 2 * c, 1, 1), np.float32)
        for i in range(c):
            w[i, c + i, 0, 0] = 1.0   # [0 | I] block: copy the attended query
        params.chan_corr_weight.data[...] = w
        params.chan_corr_bias.data[...] = 0
        y = rng.standard_normal((c, 5, 5)).astype(np.float32)
        out = rg.channel_correlation(T.tensor(rng.standard_normal((c, 6, 6)).astype(np.float32)),
                                     T.tensor(y), params)
        np.testing.assert_allclose(out.data, y, atol=1e-6)

    def test_zero_support_identity_weight_gives_bias(self, rng):
        c = 4
        params = _params(c)
        w = np.zeros((c, 2 * c, 1, 1), np.float32)
        for i in range(c):
            w[i, i, 0, 0] = 1.0       # [I | 0] block: copy the (zero) support
        params.chan_corr_weight.data[...] = w
        bias = rng.standard_normal(c).astype(np.float32)
        params.chan_corr_bias.data[...] = bias
        out = rg.channel_correlation(T.zeros((c, 6, 6)),
                                     T.tensor(rng.standard_normal((c, 5, 5)).astype(np.float32)),
                                     params)
        np.testing.assert_allclose(out.data, np.broadcast_to(bias[:, None, None], (c, 5, 5)),
                                   atol=1e-6)

    def test_matches_per_pixel_matrix_oracle(self):
        rng = np.random.default_rng(41)
        c = 3
        params = _params(c, seed=4)
        sup = rng.standard_normal((c, 7, 7))
        y = rng.standard_normal((c, 4, 5))
        out = rg.channel_correlation(T.tensor(sup), T.tensor(y), params)
        s_vec = sup.mean(axis=(1, 2))
        wmat = params.chan_corr_weight.data[:, :, 0, 0]
        expect = np.zeros_like(y)
        for i in range(4):
            for j in range(5):
                cat = np.concatenate([s_vec, y[:, i, j]])
                expect[:, i, j] = wmat @ cat + params.chan_corr_bias.data
        np.testing.assert_allclose(out.data, expect, atol=1e-6)


class TestGuide:
    def _pyr(self, rng, c=4):
        return FeaturePyramid(
            T.tensor(rng.standard_normal((c, 8, 8)).astype(np.float32)),
            T.tensor(rng.standard_normal((c, 4, 4)).astype(np.float32)),
            T.tensor(rng.standard_normal((c, 2, 2)).astype(np.float32)),
        )

    def test_zero_support_passthrough_weights_identity(self, rng):
        c = 4
        params = _params(c)
        w = np.zeros((c, 2 * c, 1, 1), np.float32)
        for i in range(c):
            w[i, c + i, 0, 0] = 1.0
        params.chan_corr_weight.data[...] = w
        params.chan_corr_bias.data[...] = 0
        query = self._pyr(rng, c)
        supports = [[T.zeros((c, 8, 8))] for _ in range(3)]
        out = rg.guide(supports, query, params)
        for a, q in zip(out.levels, query.levels):
            np.testing.assert_array_equal(a.data, q.data)

    def test_output_shapes_match_query(self, rng):
        params = _params(4)
        query = self._pyr(rng, 4)
        supports = [[T.tensor(rng.standard_normal((4, 8, 8)).astype(np.float32))
                     for _ in range(3)] for _ in range(3)]
        out = rg.guide(supports, query, params)
        for a, q in zip(out.levels, query.levels):
            assert a.shape == q.shape

    def test_end_to_end_matches_composed_oracle(self):
        rng = np.random.default_rng(55)
        c = 3
        params = _params(c, seed=6)
        query = self._pyr(rng, c)
        shots = [[T.tensor(rng.standard_normal((c, 8, 8))) for _ in range(2)]
                 for _ in range(3)]
        out = rg.guide(shots, query, params)
        wmat = params.chan_corr_weight.data[:, :, 0, 0].astype(np.float64)
        bias = params.chan_corr_bias.data.astype(np.float64)
        for lvl in range(3):
            proto = (shots[lvl][0].data + shots[lvl][1].data) / 2.0
            q = query.levels[lvl].data.astype(np.float64)
            k1 = adaptive_avg_pool_oracle(proto, 1, 1)
            k31 = adaptive_avg_pool_oracle(proto, 3, 1)
            k13 = adaptive_avg_pool_oracle(proto, 1, 3)
            spatial = (q + depthwise_xcorr_oracle(q, k1)
                       + depthwise_xcorr_oracle(depthwise_xcorr_oracle(q, k31), k13))
            s_vec = proto.mean(axis=(1, 2))
            h, w = q.shape[1:]
            expect = np.zeros_like(q)
            for i in range(h):
                for j in range(w):
                    cat = np.concatenate([s_vec, spatial[:, i, j]])
                    expect[:, i, j] = wmat @ cat + bias
            np.testing.assert_allclose(out.levels[lvl].data, expect, atol=1e-5)

    def test_misaligned_pyramids_rejected(self, rng):
        with pytest.raises(ValueError):
            rg.guide([[T.zeros((4, 8, 8))]], self._pyr(rng, 4), _params(4))

    def test_whole_block_gradients(self):
        c = 4
        params = rg.RGParams(ModelConfig(channels=c), np.random.default_rng(8))
        sup0 = np.random.default_rng(9).standard_normal((c, 6, 6))
        q0 = np.random.default_rng(10).standard_normal((c, 5, 5))

        def f(sup, q, w, b):
            p = rg.RGParams.__new__(rg.RGParams)
            p.chan_corr_weight = w
            p.chan_corr_bias = b
            spatial = rg.spatial_scale_correlation(rg.build_kernels(sup), q)
            out = rg.channel_correlation(sup, spatial, p)
            return T.tsum(T.mul(out, out))

        err = T.grad_check(f, [T.tensor(sup0), T.tensor(q0),
                               params.chan_corr_weight, params.chan_corr_bias])
        assert err < 1e-4

    def test_strip_path_mac_claim(self, rng):
        c, h, w = 16, 12, 10
        q = T.tensor(rng.standard_normal((c, h, w)).astype(np.float32))
        sup = T.tensor(rng.standard_normal((c, 8, 8)).astype(np.float32))
        k = rg.build_kernels(sup)
        T.reset_mac_count()
        T.depthwise_xcorr(T.depthwise_xcorr(q, k.k31), k.k13)
        assert T.mac_count() == 6 * c * h * w
        dense = T.tensor(rng.standard_normal((c, 3, 3)).astype(np.float32))
        T.reset_mac_count()
        T.depthwise_xcorr(q, dense)
        assert T.mac_count() == 9 * c * h * w
