"""Op-level tests for the autodiff engine.

Expected values come from three places: hand-computable cases asserted
inline, naive loop oracles implemented here, and central finite differences
(tests/gradcheck.py) for every backward rule.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kneegrade import tensor as T
from kneegrade.errors import ConfigurationError, DataError, NumericsError, UsageError

from gradcheck import check_gradients


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct quadruple-loop cross correlation, the conv oracle."""
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    og = cout // groups
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            g = co // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, g * cg:(g + 1) * cg,
                               i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[ni, co, i, j] = float((patch * w[co]).sum())
            if b is not None:
                out[ni, co] += b[co]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestElementwise:
    def test_add_mul_scale_values(self):
        a = T.Tensor([1.0, 2.0, 3.0])
        b = T.Tensor([4.0, 5.0, 6.0])
        assert np.array_equal(T.add(a, b).data, [5.0, 7.0, 9.0])
        assert np.array_equal(T.mul(a, b).data, [4.0, 10.0, 18.0])
        assert np.array_equal(T.scale(a, 2.0).data, [2.0, 4.0, 6.0])

    def test_shape_mismatch_rejected(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((3, 2)))
        with pytest.raises(ConfigurationError):
            T.add(a, b)
        with pytest.raises(ConfigurationError):
            T.mul(a, b)

    def test_relu_sigmoid_values(self):
        x = T.Tensor([-2.0, 0.0, 3.0])
        assert np.array_equal(T.relu(x).data, [0.0, 0.0, 3.0])
        s = T.sigmoid(T.Tensor([0.0])).data
        assert abs(s[0] - 0.5) < 1e-7

    def test_sigmoid_extreme_logits_stay_finite(self):
        out = T.sigmoid(T.Tensor([-1e4, 1e4], dtype=np.float64)).data
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_elementwise_grads(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        check_gradients(lambda ts: T.mean_all(T.mul(T.add(ts[0], ts[1]), ts[1])), [a, b])
        # keep relu inputs away from the kink
        c = rng.normal(size=(3, 4))
        c[np.abs(c) < 0.2] = 0.5
        check_gradients(lambda ts: T.mean_all(T.relu(ts[0])), [c])
        check_gradients(lambda ts: T.mean_all(T.sigmoid(ts[0])), [a])


class TestShapeOps:
    def test_reshape_roundtrip(self, rng):
        x = rng.normal(size=(2, 6))
        t = T.Tensor(x, requires_grad=True)
        y = T.reshape(T.reshape(t, (3, 4)), (2, 6))
        assert np.array_equal(y.data, x.astype(np.float32))

    def test_broadcast_backward_sums(self):
        t = T.Tensor(np.ones(3), requires_grad=True)
        y = T.broadcast_to(T.reshape(t, (1, 3)), (4, 3))
        T.backward(T.reduce_sum(y))
        assert np.array_equal(t.grad, np.full(3, 4.0, dtype=np.float32))

    def test_reduce_sum_axes(self, rng):
        x = rng.normal(size=(2, 3, 4))
        t = T.Tensor(x)
        assert np.allclose(T.reduce_sum(t, axis=(1, 2)).data, x.astype(np.float32).sum(axis=(1, 2)))
        check_gradients(lambda ts: T.mean_all(T.reduce_sum(ts[0], axis=1, keepdims=True)), [x])

    def test_shape_op_grads(self, rng):
        x = rng.normal(size=(2, 3))
        check_gradients(
            lambda ts: T.reduce_sum(T.mul(T.broadcast_to(T.reshape(ts[0], (2, 3, 1)), (2, 3, 4)),
                                          T.broadcast_to(T.reshape(ts[0], (2, 3, 1)), (2, 3, 4)))),
            [x])


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(T.Tensor(x), T.Tensor(w), padding=1)
        assert np.allclose(out.data, x, atol=1e-7)

    def test_constant_input_ones_kernel(self):
        # every 3x3 window of 2s sums to 18
        x = T.Tensor(np.full((1, 1, 4, 4), 2.0))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w)
        assert np.allclose(out.data, 18.0)
        assert out.data.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_naive_oracle(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                       T.Tensor(b, dtype=np.float64), stride=stride, padding=padding).data
        want = naive_conv2d(x, w, b, stride=stride, padding=padding)
        assert np.allclose(got, want, atol=1e-10)

    def test_grouped_equals_per_group_concat(self, rng):
        x = rng.normal(size=(2, 4, 5, 5))
        w = rng.normal(size=(6, 2, 3, 3))
        grouped = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                           groups=2, padding=1).data
        lo = T.conv2d(T.Tensor(x[:, :2], dtype=np.float64), T.Tensor(w[:3], dtype=np.float64),
                      padding=1).data
        hi = T.conv2d(T.Tensor(x[:, 2:], dtype=np.float64), T.Tensor(w[3:], dtype=np.float64),
                      padding=1).data
        assert np.array_equal(grouped, np.concatenate([lo, hi], axis=1))
        assert np.allclose(grouped, naive_conv2d(x, w, groups=2, padding=1), atol=1e-10)

    def test_group_divisibility_errors(self, rng):
        x = T.Tensor(np.zeros((1, 3, 4, 4)))
        w = T.Tensor(np.zeros((4, 1, 3, 3)))
        with pytest.raises(ConfigurationError):
            T.conv2d(x, w, groups=2)
        with pytest.raises(ConfigurationError):
            T.conv2d(T.Tensor(np.zeros((1, 2, 2, 2))), T.Tensor(np.zeros((1, 2, 3, 3))))

    @pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 1, 2)])
    def test_conv_grads(self, rng, stride, padding, groups):
        x = rng.normal(size=(2, 4, 5, 5))
        w = rng.normal(size=(4, 4 // groups, 3, 3))
        b = rng.normal(size=4)
        check_gradients(
            lambda ts: T.mean_all(T.conv2d(ts[0], ts[1], ts[2],
                                           stride=stride, padding=padding, groups=groups)),
            [x, w, b])


class TestBatchNorm:
    def test_train_constant_batch_gives_beta(self):
        x = T.Tensor(np.full((2, 3, 4, 4), 5.0))
        gamma = T.Tensor(np.ones(3))
        beta = T.Tensor(np.full(3, 0.25))
        rm, rv = np.zeros(3), np.ones(3)
        out = T.batch_norm2d(x, gamma, beta, rm, rv, training=True)
        assert np.allclose(out.data, 0.25, atol=1e-6)

    def test_eval_matches_closed_form(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        gamma = rng.normal(size=3)
        beta = rng.normal(size=3)
        rm = rng.normal(size=3)
        rv = rng.uniform(0.5, 2.0, size=3)
        eps = 1e-5
        out = T.batch_norm2d(T.Tensor(x, dtype=np.float64), T.Tensor(gamma, dtype=np.float64),
                             T.Tensor(beta, dtype=np.float64), rm, rv,
                             training=False, eps=eps).data
        want = (x - rm[None, :, None, None]) / np.sqrt(rv + eps)[None, :, None, None]
        want = want * gamma[None, :, None, None] + beta[None, :, None, None]
        assert np.allclose(out, want, atol=1e-12)

    def test_running_stats_update(self, rng):
        x = rng.normal(size=(4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        T.batch_norm2d(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                       rm, rv, training=True, momentum=0.1)
        assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-6)
        assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-6)

    def test_single_element_batch_rejected(self):
        from kneegrade.errors import NormalizationError
        x = T.Tensor(np.zeros((1, 3, 1, 1)))
        with pytest.raises(NormalizationError):
            T.batch_norm2d(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)),
                           np.zeros(3), np.ones(3), training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm_grads(self, rng, training):
        x = rng.normal(size=(3, 2, 4, 4))
        gamma = rng.uniform(0.5, 1.5, size=2)
        beta = rng.normal(size=2)
        rm = rng.normal(size=2)
        rv = rng.uniform(0.5, 2.0, size=2)
        check_gradients(
            lambda ts: T.mean_all(T.batch_norm2d(ts[0], ts[1], ts[2], rm.copy(), rv.copy(),
                                                 training=training)),
            [x, gamma, beta])


class TestPooling:
    def test_avg_pool_values(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = T.avg_pool2d(T.Tensor(x), 2, 2).data
        want = np.array([[2.5, 4.5], [10.5, 12.5]], dtype=np.float32)
        assert np.array_equal(out[0, 0], want)

    def test_avg_pool_overlapping_matches_windows(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        out = T.avg_pool2d(T.Tensor(x, dtype=np.float64), 3, 1).data
        for i in range(3):
            for j in range(3):
                assert np.allclose(out[:, :, i, j], x[:, :, i:i + 3, j:j + 3].mean(axis=(2, 3)))

    def test_global_avg_pool(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        out = T.global_avg_pool(T.Tensor(x, dtype=np.float64)).data
        assert np.allclose(out, x.mean(axis=(2, 3)))

    def test_pool_grads(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        check_gradients(lambda ts: T.mean_all(T.avg_pool2d(ts[0], 2, 2)), [x])
        check_gradients(lambda ts: T.mean_all(T.avg_pool2d(ts[0], 3, 1)), [x])
        check_gradients(lambda ts: T.mean_all(T.global_avg_pool(ts[0])), [x])


class TestLinearDropout:
    def test_linear_values(self):
        x = T.Tensor([[1.0, 2.0]])
        w = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
        b = T.Tensor([0.5, -0.5])
        assert np.allclose(T.linear(x, w, b).data, [[11.5, 16.5]])

    def test_linear_grads(self, rng):
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=5)
        check_gradients(lambda ts: T.mean_all(T.linear(ts[0], ts[1], ts[2])), [x, w, b])

    def test_dropout_eval_and_p0_are_identity(self, rng):
        x = T.Tensor(rng.normal(size=(3, 3)))
        assert T.dropout(x, 0.5, training=False, rng=None) is x
        assert T.dropout(x, 0.0, training=True, rng=np.random.default_rng(0)) is x

    def test_dropout_scales_survivors(self, rng):
        x = T.Tensor(np.ones((100, 100)))
        out = T.dropout(x, 0.5, training=True, rng=np.random.default_rng(3)).data
        kept = out[out != 0]
        assert np.allclose(kept, 2.0)
        assert abs(kept.size / out.size - 0.5) < 0.02

    def test_dropout_deterministic_given_seed(self):
        x = T.Tensor(np.ones((8, 8)))
        a = T.dropout(x, 0.3, training=True, rng=np.random.default_rng(11)).data
        b = T.dropout(x, 0.3, training=True, rng=np.random.default_rng(11)).data
        assert np.array_equal(a, b)

    def test_dropout_bad_p(self):
        with pytest.raises(ConfigurationError):
            T.dropout(T.Tensor([1.0]), 1.0, training=True, rng=np.random.default_rng(0))

    def test_dropout_grad_with_fixed_mask(self, rng):
        x = rng.normal(size=(4, 4))
        check_gradients(
            lambda ts: T.mean_all(T.dropout(ts[0], 0.4, training=True,
                                            rng=np.random.default_rng(5))),
            [x])


class TestClassification:
    def test_softmax_uniform(self):
        out = T.softmax(T.Tensor(np.zeros((2, 5)))).data
        assert np.allclose(out, 0.2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_softmax_rows_sum_to_one(self, n, k, seed):
        logits = np.random.default_rng(seed).normal(scale=20.0, size=(n, k))
        out = T.softmax(T.Tensor(logits, dtype=np.float64)).data
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0)

    def test_softmax_huge_logits_finite(self):
        out = T.softmax(T.Tensor([[1e4, -1e4, 0.0]], dtype=np.float64)).data
        assert np.all(np.isfinite(out))

    def test_cross_entropy_uniform_logits(self):
        logits = T.Tensor(np.zeros((3, 5)))
        out = T.cross_entropy(logits, np.array([0, 2, 4]))
        assert abs(out.item() - np.log(5.0)) < 1e-6

    def test_cross_entropy_matches_log_softmax(self, rng):
        logits = rng.normal(size=(6, 4))
        t = rng.integers(0, 4, size=6)
        out = T.cross_entropy(T.Tensor(logits, dtype=np.float64), t).item()
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        assert abs(out + logp[np.arange(6), t].mean()) < 1e-12

    def test_cross_entropy_target_validation(self):
        logits = T.Tensor(np.zeros((2, 3)))
        with pytest.raises(DataError, match="row 1"):
            T.cross_entropy(logits, np.array([0, 3]))
        with pytest.raises(DataError):
            T.cross_entropy(logits, np.array([0.5, 1.5]))

    def test_classification_grads(self, rng):
        logits = rng.normal(size=(5, 4))
        t = rng.integers(0, 4, size=5)
        check_gradients(lambda ts: T.cross_entropy(ts[0], t), [logits])
        check_gradients(lambda ts: T.mean_all(T.mul(T.softmax(ts[0]), ts[0])), [logits])


class TestBackward:
    def test_sum_of_squares(self):
        x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.backward(T.reduce_sum(T.mul(x, x)))
        assert np.allclose(x.grad, [2.0, -4.0, 6.0])

    def test_repeated_backward_accumulates(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        loss = T.reduce_sum(T.mul(x, x))
        T.backward(loss)
        T.backward(loss)
        assert np.allclose(x.grad, [4.0, 8.0])

    def test_shared_input_fan_out(self):
        # y = x*x + x so dy/dx = 2x + 1
        x = T.Tensor([3.0], requires_grad=True)
        T.backward(T.reduce_sum(T.add(T.mul(x, x), x)))
        assert np.allclose(x.grad, [7.0])

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            T.backward(T.mul(x, x))

    def test_no_grad_graph_rejected(self):
        x = T.Tensor([1.0])
        with pytest.raises(UsageError):
            T.backward(T.reduce_sum(x))

    def test_no_tape_without_requires_grad(self):
        x = T.Tensor([1.0, 2.0])
        y = T.mul(x, x)
        assert y._parents == () and y._backward is None


class TestNumerics:
    def test_nan_input_raises_at_first_op(self):
        x = T.Tensor([1.0, 2.0])
        x.data[0] = np.nan
        with pytest.raises(NumericsError):
            T.mul(x, x)

    def test_float64_opt_in(self):
        t = T.Tensor([1.0], dtype=np.float64)
        assert t.dtype == np.float64
        assert T.Tensor([1.0]).dtype == np.float32
        assert T.mul(t, t).dtype == np.float64

    def test_forward_determinism(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        runs = []
        for _ in range(2):
            xt = T.Tensor(x, requires_grad=True)
            out = T.mean_all(T.conv2d(xt, T.Tensor(w, requires_grad=True), padding=1))
            T.backward(out)
            runs.append((out.data.copy(), xt.grad.copy()))
        assert np.array_equal(runs[0][0], runs[1][0])
        assert np.array_equal(runs[0][1], runs[1][1])
