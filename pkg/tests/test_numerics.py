"""Kernel-level tests: hand-derived values, invariants, gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evhybrid.errors import NumericError, ShapeError
from evhybrid.numerics import WIDE, GradTape, Tensor, grad_check, ops


def wide(arr, grad=False):
    return Tensor(np.asarray(arr), dtype=WIDE, requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = wide(rng.standard_normal((1, 6, 5)))
        w = wide(np.ones((1, 1, 1, 1)))
        out = ops.conv2d(x, w)
        np.testing.assert_allclose(out.data, x.data)

    def test_hand_evaluated_2x2(self):
        x = wide([[[1.0, 2.0], [3.0, 4.0]]])
        w = wide(np.ones((1, 1, 2, 2)))
        out = ops.conv2d(x, w, stride=1, padding=0)
        np.testing.assert_allclose(out.data, [[[10.0]]])

    def test_zero_input_zero_bias(self):
        x = wide(np.zeros((3, 4, 4)))
        w = wide(np.random.default_rng(1).standard_normal((2, 3, 3, 3)))
        out = ops.conv2d(x, w, bias=wide(np.zeros(2)), padding=1)
        assert not np.any(out.data)

    def test_output_shape_arithmetic(self):
        x = wide(np.zeros((2, 11, 9)))
        w = wide(np.zeros((4, 2, 3, 3)))
        out = ops.conv2d(x, w, stride=2, padding=1)
        assert out.shape == (4, 6, 5)

    def test_channel_mismatch_names_axis(self):
        x = wide(np.zeros((3, 4, 4)))
        w = wide(np.zeros((2, 2, 3, 3)))
        with pytest.raises(ShapeError, match="channel"):
            ops.conv2d(x, w)

    def test_groups_divisibility_error(self):
        x = wide(np.zeros((3, 4, 4)))
        w = wide(np.zeros((2, 1, 3, 3)))
        with pytest.raises(ShapeError, match="divisible"):
            ops.conv2d(x, w, groups=2)

    @given(
        groups=st.sampled_from([1, 2, 4]),
        stride=st.sampled_from([1, 2]),
        padding=st.sampled_from([0, 1]),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=30, deadline=None)
    def test_grouped_equals_independent_convs(self, groups, stride, padding, seed):
        rng = np.random.default_rng(seed)
        c_in, c_out, k, h, w = 4, 8, 3, 6, 7
        x = rng.standard_normal((c_in, h, w))
        wt = rng.standard_normal((c_out, c_in // groups, k, k))
        b = rng.standard_normal(c_out)
        full = ops.conv2d(wide(x), wide(wt), wide(b), stride=stride, padding=padding, groups=groups)
        per_group = []
        cg_in, cg_out = c_in // groups, c_out // groups
        for g in range(groups):
            xs = wide(x[g * cg_in : (g + 1) * cg_in])
            ws = wide(wt[g * cg_out : (g + 1) * cg_out])
            bs = wide(b[g * cg_out : (g + 1) * cg_out])
            per_group.append(ops.conv2d(xs, ws, bs, stride=stride, padding=padding).data)
        np.testing.assert_allclose(full.data, np.concatenate(per_group, axis=0), atol=1e-6)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 2, 5, 5))
        wt = wide(rng.standard_normal((4, 2, 3, 3)))
        batched = ops.conv2d(wide(x), wt, padding=1).data
        singles = np.stack([ops.conv2d(wide(x[i]), wt, padding=1).data for i in range(3)])
        np.testing.assert_allclose(batched, singles)


class TestBatchNorm:
    def test_identity_configuration(self):
        x = wide(np.random.default_rng(0).standard_normal((2, 3, 3)))
        out = ops.batchnorm2d(x, np.zeros(2), np.ones(2), np.ones(2), np.zeros(2), eps=0.0)
        np.testing.assert_allclose(out.data, x.data)

    def test_hand_evaluated(self):
        x = wide(np.full((1, 1, 1), 2.0))
        out = ops.batchnorm2d(x, np.array([1.0]), np.array([3.0]), np.array([2.0]), np.array([4.0]), eps=1.0)
        np.testing.assert_allclose(out.data, [[[5.0]]])

    def test_negative_variance_rejected(self):
        x = wide(np.zeros((1, 2, 2)))
        with pytest.raises(NumericError, match="variance"):
            ops.batchnorm2d(x, np.zeros(1), np.array([-1.0]), np.ones(1), np.zeros(1), eps=0.1)

    def test_constant_input_batch_stats_gives_bias(self):
        # zero batch variance is kept finite by eps; output collapses to beta
        x = wide(np.full((4, 3, 3), 7.0))
        mu = ops.mean(x, axis=(1, 2))
        var = ops.mean((x - ops.reshape(mu, (-1, 1, 1))) ** 2.0, axis=(1, 2))
        out = ops.batchnorm2d(x, mu, var, np.ones(4), np.full(4, 1.5), eps=1e-5)
        np.testing.assert_allclose(out.data, 1.5, atol=1e-6)


class TestSoftmaxRows:
    def test_equal_values_uniform(self):
        out = ops.softmax_rows(wide(np.full((3, 5), 2.5)))
        np.testing.assert_allclose(out.data, 0.2)

    def test_closed_form(self):
        out = ops.softmax_rows(wide([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_single_column_all_ones(self):
        out = ops.softmax_rows(wide([[3.0], [-1.0]]))
        np.testing.assert_allclose(out.data, 1.0)

    def test_nan_rejected(self):
        with pytest.raises(NumericError, match="NaN"):
            ops.softmax_rows(wide([[np.nan, 0.0]]))

    @given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one_and_shift_invariance(self, seed, shift):
        m = np.random.default_rng(seed).standard_normal((4, 6))
        out = ops.softmax_rows(wide(m))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out.data >= 0)
        shifted = ops.softmax_rows(wide(m + shift))
        np.testing.assert_allclose(out.data, shifted.data, atol=1e-6)


class TestBilinearSample:
    def test_integer_coordinates_exact(self):
        m = np.arange(12.0).reshape(3, 4)
        for y in range(3):
            for x in range(4):
                out = ops.bilinear_sample(wide(m), float(x), float(y))
                assert out.data == m[y, x]

    def test_midpoint(self):
        m = wide([[0.0, 1.0], [2.0, 3.0]])
        assert ops.bilinear_sample(m, 0.5, 0.5).data == pytest.approx(1.5)

    def test_far_outside_is_zero(self):
        m = wide(np.ones((4, 4)))
        assert ops.bilinear_sample(m, -5.0, -5.0).data == 0.0

    def test_partial_overlap_zero_padded(self):
        m = wide(np.ones((4, 4)))
        assert ops.bilinear_sample(m, -0.5, 0.0).data == pytest.approx(0.5)

    @given(
        seed=st.integers(0, 2**31 - 1),
        x=st.floats(-2, 5),
        y=st.floats(-2, 5),
        delta=st.floats(1e-4, 0.2),
    )
    @settings(max_examples=60, deadline=None)
    def test_lipschitz_continuity(self, seed, x, y, delta):
        m = np.random.default_rng(seed).standard_normal((4, 4))
        lip = 2.0 * np.abs(m).max()
        a = ops.bilinear_sample(wide(m), x, y).data
        b = ops.bilinear_sample(wide(m), x + delta, y).data
        assert abs(b - a) <= lip * delta + 1e-9


class TestGradients:
    # full coordinate-wise finite differences on tiny shapes
    def test_conv2d_linear_in_inputs(self):
        rng = np.random.default_rng(7)
        x = wide(rng.standard_normal((2, 5, 5)), grad=True)
        w = wide(rng.standard_normal((4, 1, 3, 3)), grad=True)
        b = wide(rng.standard_normal(4), grad=True)
        rep = grad_check(
            lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1, groups=2),
            [x, w, b],
            rng=rng,
        )
        assert rep.passed and rep.max_rel_error < 1e-6

    def test_softmax_rows_gradient(self):
        rng = np.random.default_rng(8)
        m = wide(rng.standard_normal((4, 4)), grad=True)
        assert grad_check(ops.softmax_rows, [m], rng=rng).passed

    def test_bilinear_sample_gradient_coords_and_map(self):
        rng = np.random.default_rng(9)
        m = wide(rng.standard_normal((5, 5)), grad=True)
        x = wide(np.asarray(1.3), grad=True)
        y = wide(np.asarray(2.7), grad=True)
        assert grad_check(ops.bilinear_sample, [m, x, y], rng=rng).passed

    def test_nonfinite_gradient_reported(self):
        x = wide(np.asarray([0.0, 1.0]), grad=True)
        rep = grad_check(lambda t: ops.log(t), [x])
        assert not rep.passed
        assert rep.failure is not None and "log" in rep.failure

    def test_narrow_floats_rejected(self):
        x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(NumericError, match="wide"):
            grad_check(lambda t: t * 2.0, [x])


class TestTape:
    def test_no_tape_records_nothing(self):
        x = wide(np.ones(3), grad=True)
        y = x * 2.0
        # outside a tape the op neither records nor marks its output
        assert y.grad is None and not y.requires_grad
        with GradTape() as tape:
            z = x * 2.0
        assert z.requires_grad and len(tape) == 1

    def test_backward_accumulates_into_leaves(self):
        x = wide(np.asarray([1.0, 2.0]), grad=True)
        with GradTape() as tape:
            y = ops.sum(x * x)
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_gradients_reuse_across_branches(self):
        x = wide(np.asarray(3.0), grad=True)
        with GradTape() as tape:
            y = x * x + x * 2.0
            (g,) = tape.gradients(y, [x])
        assert g == pytest.approx(8.0)

    def test_detach_blocks_gradient(self):
        x = wide(np.asarray(3.0), grad=True)
        with GradTape() as tape:
            y = x.detach() * x
            (g,) = tape.gradients(y, [x])
        assert g == pytest.approx(3.0)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))


class TestSpike:
    def test_hard_forward_binary(self):
        u = wide([-1.0, 0.0, 2.0])
        out = ops.spike(u)
        np.testing.assert_array_equal(out.data, [0.0, 1.0, 1.0])

    def test_surrogate_derivative_at_zero(self):
        u = wide(np.asarray(0.0), grad=True)
        with GradTape() as tape:
            s = ops.spike(u)
            (g,) = tape.gradients(s, [u])
        assert g == pytest.approx(1.0)  # alpha/2 with alpha = 2

    def test_surrogate_derivative_vanishes_at_infinity(self):
        u = wide(np.asarray([-1e6, 1e6]), grad=True)
        with GradTape() as tape:
            s = ops.sum(ops.spike(u))
            (g,) = tape.gradients(s, [u])
        np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_smooth_mode_gradcheck(self):
        rng = np.random.default_rng(11)
        u = wide(rng.standard_normal((3, 3)), grad=True)
        assert grad_check(lambda u: ops.spike(u, smooth=True), [u], rng=rng).passed
