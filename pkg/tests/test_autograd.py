"""
Tests for autograd.py module.

Layer gradients are checked against central finite differences in float64.
"""

import numpy as np
import pytest

import autograd as ag
from autograd import AdamState, LayerTag, Parameter, ParamKind

LAYER_TOLERANCE = 1e-6


def _check(analytic, f, x):
    numeric = ag.numerical_gradient(f, x)
    assert ag.relative_error(analytic, numeric) < LAYER_TOLERANCE


# ============================================================================
# Tags and Parameters
# ============================================================================


class TestParamKind:
    """Kind codes are stable and round-trip."""

    def test_codes_unique(self):
        codes = [kind.code for kind in ParamKind]
        assert len(set(codes)) == len(codes)

    def test_from_code(self):
        for kind in ParamKind:
            assert ParamKind.from_code(kind.code) is kind

    def test_unknown_code(self):
        with pytest.raises(ValueError):
            ParamKind.from_code(250)

    def test_running_stats_not_trainable(self):
        assert not LayerTag(ParamKind.BN_RUNNING_MEAN, 0).trainable
        assert not LayerTag(ParamKind.BN_RUNNING_VAR, 0).trainable
        assert LayerTag(ParamKind.BN_GAMMA, 0).trainable
        assert LayerTag(ParamKind.BN_GAMMA, 0).is_batchnorm
        assert not LayerTag(ParamKind.CONV_WEIGHT, 0).is_batchnorm


class TestParameter:
    def test_accumulate_shape_checked(self):
        p = Parameter(np.zeros(3), LayerTag(ParamKind.CONV_BIAS, 0))
        with pytest.raises(ValueError, match="shape"):
            p.accumulate(np.zeros(4))

    def test_accumulate_and_zero(self):
        p = Parameter(np.zeros(2), LayerTag(ParamKind.CONV_BIAS, 0))
        p.accumulate(np.ones(2))
        p.accumulate(np.ones(2))
        np.testing.assert_array_equal(p.grad, [2.0, 2.0])
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])


# ============================================================================
# Convolution
# ============================================================================


class TestConv2d:
    """Same-padded convolution: shapes, validation and gradients."""

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_gradients(self, rng, k):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        g = rng.standard_normal((2, 4, 8, 8))

        def f():
            return float((ag.conv2d(x, w, b)[0] * g).sum())

        _, cache = ag.conv2d(x, w, b)
        dx, dw, db = ag.conv2d_backward(g, cache)
        _check(dx, f, x)
        _check(dw, f, w)
        _check(db, f, b)

    def test_same_padding_shape(self, rng):
        out, _ = ag.conv2d(rng.standard_normal((1, 1, 9, 9)), np.ones((2, 1, 3, 3)), np.zeros(2))
        assert out.shape == (1, 2, 9, 9)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out, _ = ag.conv2d(x, w, np.zeros(1))
        np.testing.assert_allclose(out, x)

    def test_box_sum_zero_padded(self):
        x = np.ones((1, 1, 3, 3))
        out, _ = ag.conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out[0, 0, 1, 1] == 9.0
        assert out[0, 0, 0, 0] == 4.0

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="axis 1"):
            ag.conv2d(rng.standard_normal((1, 2, 8, 8)), np.ones((1, 3, 3, 3)), np.zeros(1))

    def test_unsupported_kernel(self, rng):
        with pytest.raises(ValueError, match="kernel"):
            ag.conv2d(rng.standard_normal((1, 1, 8, 8)), np.ones((1, 1, 5, 5)), np.zeros(1))

    def test_input_smaller_than_kernel(self, rng):
        with pytest.raises(ValueError, match="smaller than kernel"):
            ag.conv2d(rng.standard_normal((1, 1, 4, 4)), np.ones((1, 1, 7, 7)), np.zeros(1))


# ============================================================================
# Batch Normalization
# ============================================================================


class TestBatchNorm2d:
    """Batch statistics in training, running statistics in evaluation."""

    def _params(self, rng, c):
        return rng.standard_normal(c) + 1.0, rng.standard_normal(c), np.zeros(c), np.ones(c)

    def test_train_gradients(self, rng):
        x = rng.standard_normal((3, 2, 4, 4))
        gamma, beta, rm, rv = self._params(rng, 2)
        g = rng.standard_normal(x.shape)

        def f():
            return float((ag.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), train=True)[0] * g).sum())

        _, cache = ag.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), train=True)
        dx, dgamma, dbeta = ag.batchnorm2d_backward(g, cache)
        _check(dx, f, x)
        _check(dgamma, f, gamma)
        _check(dbeta, f, beta)

    def test_eval_gradients(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        gamma, beta, _, _ = self._params(rng, 2)
        rm = rng.standard_normal(2)
        rv = rng.random(2) + 0.5
        g = rng.standard_normal(x.shape)

        def f():
            return float((ag.batchnorm2d(x, gamma, beta, rm, rv, train=False)[0] * g).sum())

        _, cache = ag.batchnorm2d(x, gamma, beta, rm, rv, train=False)
        dx, _, _ = ag.batchnorm2d_backward(g, cache)
        _check(dx, f, x)

    def test_train_output_normalized(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 2.0
        out, _ = ag.batchnorm2d(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), train=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((2, 1, 4, 4)) + 5.0
        rm = np.zeros(1)
        rv = np.ones(1)
        ag.batchnorm2d(x, np.ones(1), np.zeros(1), rm, rv, train=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean())
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(ddof=1))

    def test_eval_does_not_mutate(self, rng):
        rm = np.array([0.5])
        rv = np.array([2.0])
        ag.batchnorm2d(rng.standard_normal((2, 1, 4, 4)), np.ones(1), np.zeros(1), rm, rv, train=False)
        assert rm[0] == 0.5 and rv[0] == 2.0

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel"):
            ag.batchnorm2d(rng.standard_normal((1, 2, 4, 4)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)


# ============================================================================
# Activation, Pooling, Upsampling
# ============================================================================


class TestRelu:
    def test_gradient(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        x[np.abs(x) < 0.05] = 0.5
        g = rng.standard_normal(x.shape)
        _, mask = ag.relu(x)
        _check(ag.relu_backward(g, mask), lambda: float((ag.relu(x)[0] * g).sum()), x)

    def test_zero_is_inactive(self):
        out, mask = ag.relu(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(mask, [False, False, True])


class TestMaxPool:
    def test_gradient(self, rng):
        x = rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64) * 0.1
        g = rng.standard_normal((1, 1, 4, 4))
        _, cache = ag.maxpool2d(x)
        _check(ag.maxpool2d_backward(g, cache), lambda: float((ag.maxpool2d(x)[0] * g).sum()), x)

    def test_values(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out, _ = ag.maxpool2d(x)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_tie_goes_to_first(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = ag.maxpool2d(x)
        assert cache.indices[0, 0, 0, 0] == 0
        dx = ag.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
        np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ag.maxpool2d(np.zeros((1, 1, 5, 4)))


class TestUpsample:
    def test_gradient(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        g = rng.standard_normal((1, 2, 6, 6))
        _check(ag.upsample2d_nearest_backward(g), lambda: float((ag.upsample2d_nearest(x) * g).sum()), x)

    def test_replication(self):
        out = ag.upsample2d_nearest(np.array([[[[1.0, 2.0]]]]))
        np.testing.assert_array_equal(out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


# ============================================================================
# Objectives
# ============================================================================


class TestL1Loss:
    def test_value(self):
        value, _ = ag.l1_loss(np.array([1.0, 2.0]), np.array([0.0, 4.0]))
        assert value == 1.5

    def test_gradient(self, rng):
        pred = rng.standard_normal((2, 1, 4, 4))
        target = pred + np.where(rng.random(pred.shape) > 0.5, 0.3, -0.3)
        _, grad = ag.l1_loss(pred, target)
        _check(grad, lambda: ag.l1_loss(pred, target)[0], pred)

    def test_zero_at_target(self):
        value, grad = ag.l1_loss(np.ones(4), np.ones(4))
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            ag.l1_loss(np.ones(3), np.ones(4))

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            ag.l1_loss(np.ones(0), np.ones(0))


class TestProxPenalty:
    def test_value_and_gradient(self):
        value, grad = ag.prox_penalty(np.array([1.0, 2.0]), np.array([0.0, 0.0]), mu=3.0)
        assert value == pytest.approx(7.5)
        np.testing.assert_array_equal(grad, [3.0, 6.0])

    def test_zero_mu(self):
        value, grad = ag.prox_penalty(np.array([1.0]), np.array([0.0]), mu=0.0)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_negative_mu(self):
        with pytest.raises(ValueError, match="non-negative"):
            ag.prox_penalty(np.zeros(1), np.zeros(1), mu=-1.0)

    def test_finite_difference(self, rng):
        w = rng.standard_normal(5)
        ref = rng.standard_normal(5)
        _, grad = ag.prox_penalty(w, ref, 2.0)
        _check(grad, lambda: ag.prox_penalty(w, ref, 2.0)[0], w)


# ============================================================================
# Adam
# ============================================================================


class TestAdam:
    """Bias-corrected Adam; running statistics are never touched."""

    def test_first_step_magnitude_is_lr(self):
        p = Parameter(np.array([1.0, -1.0]), LayerTag(ParamKind.CONV_WEIGHT, 0))
        p.accumulate(np.array([0.5, -2.0]))
        state = AdamState.for_parameter(p, lr=0.01)
        ag.adam_step(p, state)
        np.testing.assert_allclose(p.value, [0.99, -0.99], rtol=1e-6)
        assert state.step == 1

    def test_matches_reference_recurrence(self):
        p = Parameter(np.array([0.3]), LayerTag(ParamKind.CONV_WEIGHT, 0))
        state = AdamState.for_parameter(p, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
        m = v = 0.0
        w = 0.3
        for t, g in enumerate([0.2, -0.1, 0.4], start=1):
            p.zero_grad()
            p.accumulate(np.array([g]))
            ag.adam_step(p, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p.value[0] == pytest.approx(w, rel=1e-12)

    def test_running_stats_skipped(self):
        p = Parameter(np.array([1.0]), LayerTag(ParamKind.BN_RUNNING_MEAN, 0))
        p.accumulate(np.array([5.0]))
        ag.adam_step(p, AdamState.for_parameter(p))
        assert p.value[0] == 1.0

    def test_optimizer_excludes_running_stats(self):
        params = [
            ("w", Parameter(np.zeros(2), LayerTag(ParamKind.CONV_WEIGHT, 0))),
            ("rm", Parameter(np.zeros(2), LayerTag(ParamKind.BN_RUNNING_MEAN, 1))),
        ]
        opt = ag.Adam(params, lr=0.1)
        assert list(opt.params) == ["w"]

    def test_non_finite_gradient_names_parameter(self):
        p = Parameter(np.zeros(2), LayerTag(ParamKind.CONV_WEIGHT, 0))
        opt = ag.Adam([("enc1.entry.conv.weight", p)])
        p.accumulate(np.array([np.nan, 0.0]))
        with pytest.raises(FloatingPointError, match="enc1.entry.conv.weight"):
            opt.step()

    def test_zero_grad(self):
        p = Parameter(np.zeros(2), LayerTag(ParamKind.CONV_WEIGHT, 0))
        opt = ag.Adam([("w", p)])
        p.accumulate(np.ones(2))
        opt.zero_grad()
        np.testing.assert_array_equal(p.grad, 0.0)


class TestGradientHelpers:
    def test_numerical_gradient_restores_input(self, rng):
        x = rng.standard_normal(4)
        before = x.copy()
        ag.numerical_gradient(lambda: float((x**2).sum()), x)
        np.testing.assert_array_equal(x, before)

    def test_relative_error_identical(self):
        assert ag.relative_error(np.ones(3), np.ones(3)) == 0.0

    def test_relative_error_scale(self):
        assert ag.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
