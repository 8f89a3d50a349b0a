"""Autodiff core: forward oracles, gradient checks, graph hygiene."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdem import tensor as T
from msdem.errors import (
    FrozenParameterError,
    NumericsError,
    ShapeError,
    ValidationError,
)


def naive_matmul(a, b):
    """Triple-loop reference product for 2-D arrays."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def naive_softmax(x):
    """Direct exp/sum softmax for a 1-D vector (float64)."""
    e = np.exp(x - np.max(x))
    return e / e.sum()


class TestForwardOracles:
    def test_matmul_tiny(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 11.0

    def test_softmax_log_ratios(self):
        x = T.Tensor(np.log([1.0, 2.0, 3.0]))
        y = T.softmax(x, axis=-1)
        np.testing.assert_allclose(y.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.normal(size=(4, 9)) * 50)
        y = T.softmax(x, axis=-1)
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(4), atol=1e-12)

    def test_softmax_extreme_logits_stable(self):
        y = T.softmax(T.Tensor([1e4, 0.0, -1e4]), axis=-1)
        assert np.all(np.isfinite(y.data))
        assert y.data[0] == pytest.approx(1.0)

    def test_cross_entropy_two_classes(self):
        loss = T.cross_entropy(T.Tensor([0.0, 0.0]), [1.0, 0.0])
        assert loss.item() == pytest.approx(np.log(2.0), rel=1e-12)

    def test_cross_entropy_confident_correct_is_tiny_nonnegative(self):
        loss = T.cross_entropy(T.Tensor([20.0, 0.0]), [1.0, 0.0])
        assert 0.0 <= loss.item() < 1e-8

    def test_gelu_known_points(self):
        # x * Phi(x) at 0 and at +/-1 (Phi(1) = 0.841344746...)
        y = T.gelu(T.Tensor([0.0, 1.0, -1.0]))
        phi1 = 0.8413447460685429
        np.testing.assert_allclose(y.data, [0.0, phi1, -(1 - phi1)], atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 7))
        a = T.log_softmax(T.Tensor(x), axis=-1).data
        b = np.log(T.softmax(T.Tensor(x), axis=-1).data)
        np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=120, deadline=None)
@given(
    m=st.integers(1, 5),
    k=st.integers(1, 5),
    n=st.integers(1, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_matmul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, k))
    b = rng.normal(size=(k, n))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a, b), rtol=1e-10, atol=1e-10)


@settings(max_examples=120, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 30.0))
def test_softmax_matches_naive(n, seed, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) * scale
    got = T.softmax(T.Tensor(x), axis=-1).data
    np.testing.assert_allclose(got, naive_softmax(x), rtol=1e-10, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    b=st.integers(1, 3),
    m=st.integers(1, 4),
    k=st.integers(1, 4),
    n=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_batched_matmul_matches_per_slice(b, m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(b, m, k))
    w = rng.normal(size=(k, n))
    got = T.matmul(T.Tensor(a), T.Tensor(w)).data
    for i in range(b):
        np.testing.assert_allclose(got[i], naive_matmul(a[i], w), rtol=1e-10, atol=1e-10)


class TestShapeAndNumericsErrors:
    def test_matmul_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_nan_input_rejected(self):
        with pytest.raises(NumericsError):
            T.Tensor([np.nan, 1.0])

    def test_log_of_zero_raises(self):
        with pytest.raises(NumericsError):
            T.log(T.Tensor([0.0, 1.0]))

    def test_softmax_empty_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(T.Tensor(np.zeros((3, 0))), axis=-1)

    def test_backward_needs_scalar(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(T.mul(x, 2.0))

    def test_cross_entropy_rejects_soft_labels(self):
        with pytest.raises(ValidationError):
            T.cross_entropy(T.Tensor([0.0, 0.0]), [0.5, 0.5])

    def test_cross_entropy_rejects_multi_hot(self):
        with pytest.raises(ValidationError):
            T.cross_entropy(T.Tensor([0.0, 0.0, 0.0]), [1.0, 1.0, 0.0])


class TestBackward:
    def test_cross_entropy_gradient_is_probs_minus_label(self):
        logits = T.Tensor([1.0, -2.0, 0.5], requires_grad=True)
        label = np.array([0.0, 1.0, 0.0])
        T.backward(T.cross_entropy(logits, label))
        probs = naive_softmax(logits.data)
        np.testing.assert_allclose(logits.grad, probs - label, atol=1e-12)

    def test_grad_accumulates_across_backward_calls(self):
        x = T.Tensor(2.0, requires_grad=True)
        T.backward(T.mul(x, 3.0))
        T.backward(T.mul(x, 3.0))
        assert x.grad == pytest.approx(6.0)

    def test_diamond_graph_sums_both_paths(self):
        # y = x*x + x  ->  dy/dx = 2x + 1
        x = T.Tensor(3.0, requires_grad=True)
        T.backward(T.add(T.mul(x, x), x))
        assert x.grad == pytest.approx(7.0)

    def test_broadcast_add_gradient_shapes(self):
        a = T.Tensor(np.ones((4, 3)), requires_grad=True)
        b = T.Tensor(np.ones(3), requires_grad=True)
        T.backward(T.tsum(T.add(a, b)))
        assert a.grad.shape == (4, 3)
        assert b.grad.shape == (3,)
        np.testing.assert_allclose(b.grad, 4 * np.ones(3))

    def test_constant_inputs_leave_no_parents(self):
        out = T.add(T.Tensor([1.0]), T.Tensor([2.0]))
        assert out._parents == ()
        assert not out.requires_grad

    def test_frozen_parameter_excluded_from_graph(self):
        p = T.Parameter(np.ones(3), "w", frozen=True)
        out = T.tsum(T.mul(p.value, 2.0))
        assert out._parents == ()
        T.backward(out)
        assert p.grad is None


class TestFiniteDiffCheck:
    def test_composite_expression_passes(self):
        rng = np.random.default_rng(0)
        w = T.Parameter(rng.normal(size=(3, 2)), "w")
        b = T.Parameter(rng.normal(size=2), "b")
        x = np.abs(rng.normal(size=(5, 3))) + 0.1

        def fn():
            h = T.add(T.matmul(T.Tensor(x), w.value), b.value)
            return T.tsum(T.mul(T.gelu(h), T.softmax(h, axis=-1)))

        assert T.finite_diff_check(fn, [w, b]) < 1e-6

    def test_log_clamp_chain_passes(self):
        m = T.Parameter(np.array([0.5, 1.5, 2.5]), "m")

        def fn():
            return T.tsum(T.log(T.clamp_min(m.value, 1e-6)))

        assert T.finite_diff_check(fn, [m]) < 1e-7

    def test_detects_wrong_gradient(self):
        p = T.Parameter(np.array([1.0, 2.0]), "p")

        def wrong(a):
            out_data = a.data**3

            def bwd(g):
                return (g * 2.0 * a.data,)  # deliberately d(x^2), not d(x^3)

            return T._from_op(out_data, (a,), bwd, "wrong")

        err = T.finite_diff_check(lambda: T.tsum(wrong(p.value)), [p])
        assert err > 1e-2

    def test_rejects_nondeterministic_fn(self):
        p = T.Parameter(np.array([1.0]), "p")
        state = {"n": 0.0}

        def fn():
            state["n"] += 1.0
            return T.tsum(T.mul(p.value, state["n"]))

        with pytest.raises(NumericsError):
            T.finite_diff_check(fn, [p])

    def test_rejects_frozen_and_float32(self):
        frozen = T.Parameter(np.ones(2), "f", frozen=True)
        with pytest.raises(FrozenParameterError):
            T.finite_diff_check(lambda: T.tsum(frozen.value), [frozen])
        f32 = T.Parameter(np.ones(2, dtype=np.float32), "g")
        with pytest.raises(ValidationError):
            T.finite_diff_check(lambda: T.tsum(f32.value), [f32])


class TestShapeOps:
    def test_reshape_transpose_roundtrip_gradient(self):
        p = T.Parameter(np.arange(24, dtype=np.float64).reshape(2, 3, 4), "p")
        weights = np.random.default_rng(1).normal(size=(2, 3, 4))

        t = T.transpose(p.value, (2, 0, 1))
        t = T.reshape(t, (24,))
        t = T.reshape(t, (4, 2, 3))
        t = T.transpose(t, (1, 2, 0))
        np.testing.assert_array_equal(t.data, p.data)
        T.backward(T.tsum(T.mul(t, T.Tensor(weights))))
        np.testing.assert_allclose(p.grad, weights, atol=1e-12)

    def test_concat_slice_inverse_gradients(self):
        a = T.Parameter(np.ones((2, 3)), "a")
        b = T.Parameter(np.ones((2, 5)), "b")
        cat = T.concat([a.value, b.value], axis=1)
        assert cat.shape == (2, 8)
        back = T.slice_axis(cat, 1, 3, 8)
        T.backward(T.tsum(back))
        np.testing.assert_allclose(a.grad, np.zeros((2, 3)))
        np.testing.assert_allclose(b.grad, np.ones((2, 5)))

    def test_stack_gradient(self):
        parts = [T.Parameter(np.full(3, float(i)), f"p{i}") for i in range(4)]
        s = T.stack([p.value for p in parts], axis=0)
        assert s.shape == (4, 3)
        T.backward(T.tsum(T.mul(s, T.Tensor(np.arange(12.0).reshape(4, 3)))))
        for i, p in enumerate(parts):
            np.testing.assert_allclose(p.grad, np.arange(12.0).reshape(4, 3)[i])


class TestParameter:
    def test_freeze_is_permanent_and_detects_mutation(self):
        p = T.Parameter(np.ones(3), "w")
        p.freeze()
        assert p.frozen
        p.check_unchanged()
        p.data[0] = 5.0
        with pytest.raises(FrozenParameterError):
            p.check_unchanged()
