"""Tensor engine: oracle equivalence, gradients, counters."""

import numpy as np
import pytest

from oredet import tensor as T
from oracles import (
    adaptive_avg_pool_oracle,
    bilinear_resize_oracle,
    conv2d_oracle,
    depthwise_xcorr_oracle,
    linear_oracle,
)


class TestDepthwiseXcorr:
    def test_ones_1x1_kernel_is_identity(self, rng):
        q = rng.standard_normal((3, 5, 4)).astype(np.float32)
        k = np.ones((3, 1, 1), dtype=np.float32)
        out = T.depthwise_xcorr(T.tensor(q), T.tensor(k))
        assert np.array_equal(out.data, q)

    def test_zero_kernel_gives_zeros(self, rng):
        q = rng.standard_normal((3, 5, 5)).astype(np.float32)
        out = T.depthwise_xcorr(T.tensor(q), T.tensor(np.zeros((3, 3, 3), np.float32)))
        assert np.all(out.data == 0)

    def test_matches_loop_oracle(self, rng):
        q = rng.standard_normal((3, 5, 5))
        k = rng.standard_normal((3, 3, 3))
        out = T.depthwise_xcorr(T.tensor(q), T.tensor(k))
        np.testing.assert_allclose(out.data, depthwise_xcorr_oracle(q, k), atol=1e-5)

    @pytest.mark.parametrize("case", range(10))
    def test_random_shapes_vs_oracle(self, case):
        rng = np.random.default_rng(100 + case)
        c = int(rng.integers(1, 5))
        h = int(rng.integers(3, 9))
        w = int(rng.integers(3, 9))
        kh, kw = rng.choice([1, 3, 5], size=2)
        q = rng.standard_normal((c, h, w))
        k = rng.standard_normal((c, int(kh), int(kw)))
        out = T.depthwise_xcorr(T.tensor(q), T.tensor(k))
        np.testing.assert_allclose(out.data, depthwise_xcorr_oracle(q, k), atol=1e-5)

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            T.depthwise_xcorr(T.zeros((3, 5, 5)), T.zeros((4, 1, 1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.depthwise_xcorr(T.zeros((3, 5, 5)), T.zeros((3, 2, 2)))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self, rng):
        x = rng.standard_normal(7)
        a = T.softmax(T.tensor(x), axis=0).data
        b = T.softmax(T.tensor(x + 123.0), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_two_branch_reshape_contract(self):
        # length K*C vector reshaped to (K, C), softmax over K
        z = T.reshape(T.tensor([1.0, 1.0]), (2, 1))
        out = T.softmax(z, axis=0)
        np.testing.assert_allclose(out.data, [[0.5], [0.5]])

    def test_slices_sum_to_one(self, rng):
        x = rng.standard_normal((4, 6, 3)) * 10
        for axis in range(3):
            out = T.softmax(T.tensor(x), axis=axis)
            sums = out.data.sum(axis=axis)
            np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)
            assert np.all(out.data > 0)


class TestAdaptiveAvgPool:
    def test_all_ones_to_global_mean(self):
        out = T.adaptive_avg_pool(T.tensor(np.ones((1, 4, 4), np.float32)), 1, 1)
        np.testing.assert_allclose(out.data, [[[1.0]]])

    def test_identity_when_same_size(self, rng):
        x = rng.standard_normal((2, 5, 3)).astype(np.float32)
        out = T.adaptive_avg_pool(T.tensor(x), 5, 3)
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_ramp_matches_window_oracle(self):
        x = np.arange(25, dtype=np.float64).reshape(1, 5, 5)
        out = T.adaptive_avg_pool(T.tensor(x), 3, 3)
        np.testing.assert_array_equal(out.data, adaptive_avg_pool_oracle(x, 3, 3))

    @pytest.mark.parametrize("case", range(10))
    def test_random_vs_oracle(self, case):
        rng = np.random.default_rng(200 + case)
        c, h, w = (int(rng.integers(1, 4)), int(rng.integers(2, 10)), int(rng.integers(2, 10)))
        oh, ow = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        x = rng.standard_normal((c, h, w))
        out = T.adaptive_avg_pool(T.tensor(x), oh, ow)
        np.testing.assert_allclose(out.data, adaptive_avg_pool_oracle(x, oh, ow), atol=1e-5)

    def test_upsample_request_rejected(self):
        with pytest.raises(ValueError):
            T.adaptive_avg_pool(T.zeros((1, 3, 3)), 4, 2)

    def test_pool_to_one_is_global_mean(self, rng):
        x = rng.standard_normal((3, 7, 6))
        out = T.adaptive_avg_pool(T.tensor(x), 1, 1)
        np.testing.assert_allclose(out.data[:, 0, 0], x.mean(axis=(1, 2)), atol=1e-6)


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        out = T.linear(T.tensor(x), T.tensor(np.eye(4, dtype=np.float32)))
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_zero_input_gives_bias(self, rng):
        b = rng.standard_normal(5).astype(np.float32)
        out = T.linear(T.zeros((2, 3)), T.zeros((3, 5)), T.tensor(b))
        np.testing.assert_allclose(out.data, np.broadcast_to(b, (2, 5)))

    def test_matches_triple_loop_oracle(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        out = T.linear(T.tensor(x), T.tensor(w))
        np.testing.assert_allclose(out.data, linear_oracle(x, w), atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            T.linear(T.zeros((2, 3)), T.zeros((4, 5)))


class TestConv2d:
    @pytest.mark.parametrize("case", range(10))
    def test_random_vs_oracle(self, case):
        rng = np.random.default_rng(300 + case)
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(4, 9)), int(rng.integers(4, 9))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        pad = k // 2
        x = rng.standard_normal((cin, h, w))
        wt = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        out = T.conv2d(T.tensor(x), T.tensor(wt), T.tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, conv2d_oracle(x, wt, b, stride, pad), atol=1e-5)

    def test_batched_matches_per_image(self, rng):
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        batched = T.conv2d(T.tensor(x), T.tensor(w), stride=1, padding=1)
        for i in range(2):
            single = T.conv2d(T.tensor(x[i]), T.tensor(w), stride=1, padding=1)
            np.testing.assert_array_equal(batched.data[i], single.data)

    def test_stride_two_shape_is_ceil_half(self):
        out = T.conv2d(T.zeros((3, 13, 9)), T.zeros((4, 3, 3, 3)), stride=2, padding=1)
        assert out.shape == (4, 7, 5)


class TestBilinearResize:
    def test_constant_preserved(self):
        out = T.bilinear_resize(T.tensor(np.full((2, 3, 3), 5.0, np.float32)), 7, 5)
        np.testing.assert_allclose(out.data, 5.0, atol=1e-6)

    @pytest.mark.parametrize("case", range(10))
    def test_random_vs_oracle(self, case):
        rng = np.random.default_rng(400 + case)
        c, h, w = int(rng.integers(1, 4)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        oh, ow = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        x = rng.standard_normal((c, h, w))
        out = T.bilinear_resize(T.tensor(x), oh, ow)
        np.testing.assert_allclose(out.data, bilinear_resize_oracle(x, oh, ow), atol=1e-5)


class TestShapeOps:
    def test_concat_split_roundtrip_bit_exact(self, rng):
        parts = [rng.standard_normal((c, 4, 4)).astype(np.float32) for c in (2, 3, 1)]
        joined = T.concat([T.tensor(p) for p in parts], axis=0)
        back = T.split(joined, [2, 3, 1], axis=0)
        for orig, piece in zip(parts, back):
            assert np.array_equal(orig, piece.data)

    def test_split_size_mismatch(self):
        with pytest.raises(ValueError):
            T.split(T.zeros((5, 2)), [2, 2], axis=0)

    def test_take_rows(self, rng):
        x = rng.standard_normal((6, 3)).astype(np.float32)
        out = T.take_rows(T.tensor(x), [4, 0, 4])
        np.testing.assert_array_equal(out.data, x[[4, 0, 4]])


class TestFiniteness:
    def test_forward_ops_finite_on_finite_input(self, rng):
        x = rng.standard_normal((3, 6, 6)).astype(np.float32) * 10
        k = rng.standard_normal((3, 3, 3)).astype(np.float32)
        outs = [
            T.depthwise_xcorr(T.tensor(x), T.tensor(k)),
            T.softmax(T.tensor(x), axis=0),
            T.adaptive_avg_pool(T.tensor(x), 2, 2),
            T.bilinear_resize(T.tensor(x), 9, 4),
            T.relu(T.tensor(x)),
            T.sigmoid(T.tensor(x * 100)),
        ]
        for out in outs:
            assert np.isfinite(out.data).all()


# ---------------------------------------------------------------------------
# gradients

def _gc(f, arrays, tol=1e-4, eps=1e-4):
    err = T.grad_check(f, [T.tensor(a) for a in arrays], eps=eps)
    assert err < tol, f"grad error {err}"


class TestGradCheck:
    def test_linear_sum_is_exact(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        err = T.grad_check(lambda xt, wt: T.tsum(T.linear(xt, wt)),
                           [T.tensor(x), T.tensor(w)])
        assert err < 1e-6

    def test_softmax_sum_gradient_is_zero(self, rng):
        x = rng.standard_normal(6)
        err = T.grad_check(lambda xt: T.tsum(T.softmax(xt, axis=0)), [T.tensor(x)])
        assert err < 1e-6

    def test_depthwise_xcorr_both_inputs(self, rng):
        q = rng.standard_normal((2, 5, 4))
        k = rng.standard_normal((2, 3, 3))
        err = T.grad_check(lambda qt, kt: T.tsum(T.mul(T.depthwise_xcorr(qt, kt),
                                                       T.depthwise_xcorr(qt, kt))),
                           [T.tensor(q), T.tensor(k)])
        assert err < 1e-5

    def test_nonfinite_reported(self):
        with pytest.raises(T.GradCheckError):
            T.grad_check(lambda x: T.tsum(T.log(x)), [T.tensor([-1.0, 2.0])])


def _rand_shape(rng, lo=1, hi=6, dims=3):
    return tuple(int(rng.integers(lo, hi)) for _ in range(dims))


OP_CASES = {
    "add": lambda rng: (lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))),
                        [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
    "sub": lambda rng: (lambda a, b: T.tsum(T.power(T.sub(a, b), 2.0)),
                        [rng.standard_normal((2, 5)), rng.standard_normal((2, 5))]),
    "mul_broadcast": lambda rng: (lambda a, b: T.tsum(T.mul(a, b)),
                                  [rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 1, 1))]),
    "div": lambda rng: (lambda a, b: T.tsum(T.div(a, b)),
                        [rng.standard_normal((2, 3)), rng.uniform(0.5, 2.0, (2, 3))]),
    "relu": lambda rng: (lambda a: T.tsum(T.power(T.relu(a), 2.0)),
                         [rng.standard_normal(20) + 0.05]),
    "sigmoid": lambda rng: (lambda a: T.tsum(T.power(T.sigmoid(a), 2.0)),
                            [rng.standard_normal(15)]),
    "exp": lambda rng: (lambda a: T.tsum(T.exp(a)), [rng.standard_normal(10)]),
    "log": lambda rng: (lambda a: T.tsum(T.log(a)), [rng.uniform(0.5, 3.0, 12)]),
    "absolute": lambda rng: (lambda a: T.tsum(T.absolute(a)),
                             [rng.standard_normal(14) + np.sign(rng.standard_normal(14)) * 0.2]),
    "softmax": lambda rng: (lambda a: T.tsum(T.power(T.softmax(a, axis=1), 2.0)),
                            [rng.standard_normal((3, 5))]),
    "matmul": lambda rng: (lambda a, b: T.tsum(T.matmul(a, b)),
                           [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
    "linear": lambda rng: (lambda x, w, b: T.tsum(T.power(T.linear(x, w, b), 2.0)),
                           [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)),
                            rng.standard_normal(2)]),
    "conv2d": lambda rng: (lambda x, w, b: T.tsum(T.power(T.conv2d(x, w, b, stride=1, padding=1), 2.0)),
                           [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)),
                            rng.standard_normal(3)]),
    "conv2d_stride2": lambda rng: (lambda x, w: T.tsum(T.power(T.conv2d(x, w, stride=2, padding=1), 2.0)),
                                   [rng.standard_normal((2, 6, 7)), rng.standard_normal((2, 2, 3, 3))]),
    "depthwise_xcorr": lambda rng: (lambda q, k: T.tsum(T.power(T.depthwise_xcorr(q, k), 2.0)),
                                    [rng.standard_normal((2, 5, 5)), rng.standard_normal((2, 3, 3))]),
    "adaptive_avg_pool": lambda rng: (lambda x: T.tsum(T.power(T.adaptive_avg_pool(x, 2, 3), 2.0)),
                                      [rng.standard_normal((2, 5, 6))]),
    "max_pool": lambda rng: (lambda x: T.tsum(T.power(T.max_pool(x, 2, 2), 2.0)),
                             [rng.standard_normal((2, 6, 6))]),
    "bilinear_resize": lambda rng: (lambda x: T.tsum(T.power(T.bilinear_resize(x, 7, 3), 2.0)),
                                    [rng.standard_normal((2, 4, 5))]),
    "concat": lambda rng: (lambda a, b: T.tsum(T.power(T.concat([a, b], axis=0), 2.0)),
                           [rng.standard_normal((2, 3, 3)), rng.standard_normal((1, 3, 3))]),
    "stack": lambda rng: (lambda a, b: T.tsum(T.power(T.stack([a, b]), 2.0)),
                          [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
    "split": lambda rng: (lambda a: T.tsum(T.power(T.split(a, [2, 3], axis=0)[1], 2.0)),
                          [rng.standard_normal((5, 3))]),
    "broadcast_to": lambda rng: (lambda a: T.tsum(T.power(T.broadcast_to(a, (4, 3, 5)), 2.0)),
                                 [rng.standard_normal((3, 1))]),
    "take_rows": lambda rng: (lambda a: T.tsum(T.power(T.take_rows(a, [0, 2, 2]), 2.0)),
                              [rng.standard_normal((4, 3))]),
    "mean": lambda rng: (lambda a: T.power(T.tmean(a), 2.0), [rng.standard_normal((3, 4))]),
    "sum_axis": lambda rng: (lambda a: T.tsum(T.power(T.tsum(a, axis=1), 2.0)),
                             [rng.standard_normal((3, 4))]),
    "reshape_transpose": lambda rng: (lambda a: T.tsum(T.power(T.transpose(T.reshape(a, (2, 6)), (1, 0)), 2.0)),
                                      [rng.standard_normal((3, 4))]),
    "clip": lambda rng: (lambda a: T.tsum(T.power(T.clip(a, -0.8, 0.8), 2.0)),
                         [rng.standard_normal(16) * 0.5]),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_gradients_over_twenty_random_seeds(op):
    """Every differentiable op: < 1e-4 max relative error on >= 20 draws."""
    for seed in range(20):
        rng = np.random.default_rng(hash(op) % 10000 + seed)
        f, arrays = OP_CASES[op](rng)
        _gc(f, arrays)


# ---------------------------------------------------------------------------
# cost counters

class TestMacCounter:
    def test_strip_path_costs_six_vs_nine(self, rng):
        c, h, w = 4, 10, 12
        y = T.tensor(rng.standard_normal((c, h, w)).astype(np.float32))
        dense = T.tensor(rng.standard_normal((c, 3, 3)).astype(np.float32))
        k31 = T.tensor(rng.standard_normal((c, 3, 1)).astype(np.float32))
        k13 = T.tensor(rng.standard_normal((c, 1, 3)).astype(np.float32))

        T.reset_mac_count()
        T.depthwise_xcorr(y, dense)
        assert T.mac_count() == 9 * c * h * w

        T.reset_mac_count()
        T.depthwise_xcorr(T.depthwise_xcorr(y, k31), k13)
        assert T.mac_count() == 6 * c * h * w

    def test_conv_macs(self):
        T.reset_mac_count()
        T.conv2d(T.zeros((3, 8, 8)), T.zeros((5, 3, 3, 3)), stride=1, padding=1)
        assert T.mac_count() == 5 * 3 * 3 * 3 * 8 * 8

    def test_alloc_accounting_grows(self):
        T.reset_alloc_bytes()
        T.zeros((10, 10))
        assert T.alloc_bytes() >= 400


class TestAutogradMechanics:
    def test_gradient_accumulates_until_zeroed(self, rng):
        x = T.tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
        T.tsum(x).backward()
        first = x.grad.copy()
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, first * 2)
        x.zero_grad()
        assert x.grad is None

    def test_no_grad_blocks_graph(self, rng):
        x = T.tensor(rng.standard_normal(4), requires_grad=True)
        with T.no_grad():
            y = T.tsum(T.mul(x, x))
        assert not y.requires_grad

    def test_reused_node_gets_summed_gradient(self, rng):
        x = T.tensor(np.array([2.0, 3.0]), requires_grad=True)
        y = T.add(T.mul(x, x), x)  # d/dx = 2x + 1
        T.tsum(y).backward()
        np.testing.assert_allclose(x.grad, [5.0, 7.0])


class TestModule:
    def test_named_parameters_are_unique_dotted_paths(self):
        class Leaf(T.Module):
            def __init__(self):
                self.weight = T.Parameter(np.zeros((2, 2), np.float32))
                self.bias = T.Parameter(np.zeros(2, np.float32))

        class Root(T.Module):
            def __init__(self):
                self.stem = Leaf()
                self.blocks = [Leaf(), Leaf()]

        root = Root()
        names = [n for n, _ in root.named_parameters()]
        assert names == ["stem.weight", "stem.bias",
                         "blocks.0.weight", "blocks.0.bias",
                         "blocks.1.weight", "blocks.1.bias"]
        assert len(set(names)) == len(names)
