"""Tensor engine: op semantics, reverse-mode gradients and the finite-difference oracle."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cesst import functional as F
from cesst.gradcheck import check_gradients, finite_diff_grad, relative_error
from cesst.gradsuite import op_suite
from cesst.tensor import (GradTape, GraphError, NonFiniteError, Tensor, backward, count_macs,
                          finite_checks, graph_nbytes, no_grad)


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


class TestTensorBasics:
    def test_shape_and_precision(self):
        t = Tensor(np.zeros((2, 3, 4), dtype=np.float32))
        assert t.shape == (2, 3, 4)
        assert t.size == 24
        assert t.precision == "f32"
        assert Tensor(np.zeros(3)).precision == "f64"

    def test_rejects_zero_extent_and_integer_data(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 0)))
        assert Tensor(np.arange(3)).dtype == np.float64

    def test_reshape_preserves_count(self):
        t = Tensor(np.arange(24.0))
        assert t.reshape(2, 3, 4).size == 24
        with pytest.raises(ValueError):
            t.reshape(5, 5)

    def test_transpose_preserves_extents(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert sorted(t.transpose(2, 0, 1).shape) == [2, 3, 4]

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_permutation_round_trip(self, a, b, c):
        x = Tensor(np.random.default_rng(a * 100 + b * 10 + c).standard_normal((a, b, c)))
        y = x.reshape(a * b, c).transpose(1, 0).reshape(c, a, b).transpose(1, 2, 0).reshape(a, b, c)
        assert np.array_equal(y.data, x.data)


class TestMatmul:
    def test_identity_left(self, rng):
        A = rng.standard_normal((2, 2))
        out = F.matmul(Tensor(np.eye(2)), Tensor(A))
        assert np.array_equal(out.data, A)

    def test_identity_right(self):
        out = F.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2)))
        assert np.array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        out = F.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ValueError) as err:
            F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_batched_broadcast(self, rng):
        a, b = rng.standard_normal((3, 2, 4)), rng.standard_normal((4, 5))
        assert np.allclose(F.matmul(Tensor(a), Tensor(b)).data, a @ b)


class TestSoftmax:
    def test_symmetric_pair(self):
        assert np.allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.5, 1e4])
    def test_constant_row(self, c):
        assert np.allclose(F.softmax(Tensor([c, c, c])).data, [1 / 3] * 3)

    def test_log_three(self):
        assert np.allclose(F.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-12)

    @given(arrays(np.float64, (4, 7), elements=st.floats(-1e4, 1e4)))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_at_large_magnitude(self, x):
        out = F.softmax(Tensor(x), axis=-1).data
        assert np.all(np.isfinite(out))
        assert np.all(out >= 0) and np.all(out <= 1)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_vector_gives_zeros(self):
        out = F.layer_norm(Tensor(np.full((1, 4), 3.0)), -1, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0)

    def test_already_standardized(self):
        out = F.layer_norm(Tensor([[1.0, -1.0]]), -1, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_affine_collapse(self, rng):
        out = F.layer_norm(Tensor(rng.standard_normal((3, 5))), -1, Tensor(np.zeros(5)), Tensor(np.full(5, 5.0)))
        assert np.allclose(out.data, 5.0)

    def test_normalized_statistics(self, rng):
        x = rng.standard_normal((2, 6, 3, 3)) * 4 + 2
        out = F.layer_norm(Tensor(x), 1, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        assert np.allclose(out.mean(axis=1), 0.0, atol=1e-10)
        assert np.allclose(out.var(axis=1), 1.0, atol=1e-3)


def naive_conv(x, w, b=None, stride=1, pad=0, groups=1):
    B, Cin, H, W = x.shape
    Cout, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    og = Cout // groups
    for n in range(B):
        for o in range(Cout):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, g * cpg:(g + 1) * cpg, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (0 if b is None else b[o])
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        assert np.allclose(F.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_ones_kernel_center_tap_count(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_depthwise_identity(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        w = np.zeros((4, 1, 3, 3))
        w[:, 0, 1, 1] = 1
        assert np.allclose(F.conv2d(Tensor(x), Tensor(w), padding=1, groups=4).data, x)

    def test_depthwise_equals_per_channel_conv(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        w = rng.standard_normal((4, 1, 3, 3))
        grouped = F.conv2d(Tensor(x), Tensor(w), padding=1, groups=4).data
        for c in range(4):
            single = F.conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]), padding=1).data
            assert np.allclose(grouped[:, c:c + 1], single, atol=1e-12)

    @pytest.mark.parametrize("stride,pad,groups,k", [(1, 1, 1, 3), (2, 1, 1, 3), (1, 0, 2, 3), (1, 0, 1, 1), (2, 0, 1, 1)])
    def test_matches_naive_loops(self, rng, stride, pad, groups, k):
        x = rng.standard_normal((2, 4, 7, 6))
        w = rng.standard_normal((6, 4 // groups, k, k))
        b = rng.standard_normal(6)
        got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, groups=groups).data
        assert np.allclose(got, naive_conv(x, w, b, stride, pad, groups), atol=1e-12)

    def test_same_padding_even_kernel_keeps_size(self, rng):
        out = F.conv2d(Tensor(rng.standard_normal((1, 2, 6, 6))), Tensor(rng.standard_normal((2, 1, 4, 4))),
                       padding="same", groups=2)
        assert out.shape == (1, 2, 6, 6)

    def test_invalid_groups(self):
        with pytest.raises(ValueError):
            F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 3, 3))), groups=2)

    def test_reflect_padding_constant_input(self):
        out = F.conv2d(Tensor(np.full((1, 1, 4, 4), 2.0)), Tensor(np.ones((1, 1, 3, 3))),
                       padding="same", padding_mode="reflect")
        assert np.allclose(out.data, 18.0)

    def test_mac_counter(self):
        with no_grad(), count_macs() as c:
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), padding=1)
        assert c.total == 1 * 3 * 16 * 2 * 9


class TestResize:
    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    @pytest.mark.parametrize("scale", [0.5, 2.0, 3.0])
    def test_constant_preserved(self, mode, scale):
        out = F.resize(Tensor(np.full((1, 2, 6, 6), 0.7)), scale, mode)
        assert np.allclose(out.data, 0.7)

    def test_nearest_block_replication(self):
        out = F.resize(Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]])), 2.0, "nearest").data[0, 0]
        expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float)
        assert np.array_equal(out, expected)

    def test_down_then_up_constant(self):
        x = Tensor(np.full((1, 1, 8, 8), 0.25))
        assert np.allclose(F.resize(F.resize(x, 0.5), 2.0).data, 0.25)

    def test_bilinear_half_is_block_mean(self, rng):
        x = rng.standard_normal((1, 1, 4, 6))
        expected = x.reshape(1, 1, 2, 2, 3, 2).mean(axis=(3, 5))
        assert np.allclose(F.resize(Tensor(x), 0.5, "bilinear").data, expected)

    def test_empty_output_rejected(self):
        with pytest.raises(ValueError):
            F.resize(Tensor(np.zeros((1, 1, 1, 1))), 0.4)


class TestPad:
    def test_reflect_matches_numpy(self, rng):
        x = rng.standard_normal((1, 2, 4, 5))
        got = F.pad2d(Tensor(x), (1, 2, 3, 1), mode="reflect").data
        assert np.array_equal(got, np.pad(x, ((0, 0), (0, 0), (1, 2), (3, 1)), mode="reflect"))


class TestBackward:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(F.sum(x * x))
        assert np.allclose(x.grad, [2, 4, 6])

    def test_constant_function_has_zero_gradient(self):
        x = leaf([1.0, 2.0])
        with no_grad():
            c = F.sum(x * 0.0) + 4.0
        backward(c)
        assert x.grad is None or np.all(x.grad == 0)

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(GraphError):
            backward(x * 2.0)

    def test_second_backward_is_error(self):
        x = leaf([1.0, 2.0])
        loss = F.sum(x * x)
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_gradient_accumulates_over_reuse(self):
        x = leaf([3.0])
        backward(F.sum(x * x + x))
        assert np.allclose(x.grad, [7.0])

    def test_broadcast_gradients(self):
        a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
        backward(F.sum(a * b))
        assert b.grad.shape == (4,) and np.allclose(b.grad, 3.0)

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_tape_is_topological(self, rng):
        x = leaf(rng.standard_normal((3, 3)))
        y = F.softmax(F.matmul(x, x), axis=-1)
        loss = F.sum(F.tanh(y) * y)
        tape = GradTape.record(loss)
        assert tape.is_topological()
        assert graph_nbytes(loss) > 0

    def test_finite_check_mode(self):
        with finite_checks(True), np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError):
                F.log(Tensor([-1.0]))


class TestFiniteDifference:
    def test_square_at_one(self):
        g = finite_diff_grad(lambda t: F.sum(t * t), Tensor([1.0]), step=1e-4)
        assert abs(g[0] - 2.0) < 1e-6

    def test_sum_gives_ones(self, rng):
        g = finite_diff_grad(lambda t: F.sum(t), Tensor(rng.standard_normal(7)))
        assert np.allclose(g, 1.0, atol=1e-8)

    def test_matmul_softmax_composite(self, rng):
        a = leaf(rng.standard_normal((4, 4)))
        b = Tensor(rng.standard_normal((4, 4)))
        w = rng.standard_normal((4, 4))
        f = lambda t: F.sum(F.softmax(F.matmul(t, b), axis=-1) * Tensor(w))  # noqa: E731
        backward(f(a))
        assert relative_error(a.grad, finite_diff_grad(f, a)) <= 1e-4

    def test_check_gradients_flags_wrong_backward(self):
        from cesst.tensor import make_result

        def bad_square(t):
            return make_result(t.data ** 2, (t,), lambda g: (g * 3 * t.data,), "bad")

        x = leaf([0.5, -1.0])
        res = check_gradients(lambda: F.sum(bad_square(x)), {"x": x})
        assert not res[0].passed


@pytest.mark.parametrize("seed", range(5))
def test_every_op_matches_finite_differences(seed):
    results = op_suite(seed)
    bad = [(r.name, r.rel_error) for r in results if not r.passed]
    assert not bad, bad
