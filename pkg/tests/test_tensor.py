"""Engine checks: closed-form outputs, gradient correctness against central
finite differences, and the algebraic invariants of the primitives."""

import math

import numpy as np
import pytest

from conftest import fd_gradcheck
from senselign import tensor as T
from senselign.errors import DegenerateVectorError, EmptySequenceError


class TestSoftmax:
    def test_symmetric_two(self):
        out = T.softmax(T.Tensor([1.0, 1.0]), tau=0.5)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_log_two_case(self):
        out = T.softmax(T.Tensor([math.log(2.0), 0.0]), tau=1.0)
        np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_symmetric_four(self):
        for tau in (0.1, 0.7, 3.0):
            out = T.softmax(T.Tensor([5.0, 5.0, 5.0, 5.0]), tau=tau)
            np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        x = T.Tensor(rng.uniform(-50, 50, size=(40, 9)))
        out = T.softmax(x, tau=0.3)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data > 0).all()

    def test_shift_invariance(self, rng):
        v = rng.uniform(-2, 2, size=11)
        a = T.softmax(T.Tensor(v), tau=0.9).data
        b = T.softmax(T.Tensor(v + 123.456), tau=0.9).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            T.softmax(T.Tensor([1.0, 2.0]), tau=0.0)
        with pytest.raises(ValueError):
            T.softmax(T.Tensor([1.0, 2.0]), tau=-1.0)

    def test_non_finite_input(self):
        with pytest.raises(ValueError):
            T.softmax(T.Tensor([1.0, math.nan]), tau=1.0)

    def test_fully_masked_rows_are_zero(self):
        mask = np.array([[True, True], [False, False]])
        out = T.softmax(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), tau=1.0, mask=mask)
        np.testing.assert_allclose(out.data[1], 0.0)
        np.testing.assert_allclose(out.data[0].sum(), 1.0, atol=1e-12)


class TestL2Normalize:
    def test_pythagorean(self):
        out = T.l2_normalize(T.Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_idempotent(self, rng):
        v = rng.standard_normal((5, 7))
        once = T.l2_normalize(T.Tensor(v)).data
        twice = T.l2_normalize(T.Tensor(once)).data
        np.testing.assert_allclose(once, twice, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(once, axis=-1), 1.0, atol=1e-12)

    def test_scale_invariance(self, rng):
        v = rng.standard_normal(9)
        base = T.l2_normalize(T.Tensor(v)).data
        for c in (1e-3, 0.5, 7.0, 1e4):
            np.testing.assert_allclose(T.l2_normalize(T.Tensor(c * v)).data, base,
                                       atol=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DegenerateVectorError) as exc:
            T.l2_normalize(T.Tensor([[1.0, 0.0], [0.0, 0.0]]))
        assert exc.value.index == 1


class TestBackward:
    def test_quadratic(self):
        x = T.parameter([1.0, 2.0])
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_constant_loss_zero_grad(self):
        x = T.parameter([1.0, 2.0])
        (x * 0.0).sum().backward()
        np.testing.assert_allclose(x.grad, 0.0)

    def test_non_scalar_rejected(self):
        x = T.parameter([1.0, 2.0])
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_repeated_calls_sum(self):
        x = T.parameter([1.0, 2.0])
        (x * x).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_diamond_graph_counts_once(self):
        x = T.parameter([3.0])
        y = x + x          # both parents are the same node
        (y * y).sum().backward()
        np.testing.assert_allclose(x.grad, [24.0])  # d/dx (2x)^2 = 8x


class TestGradientsAgainstFiniteDifferences:
    """Every primitive, composed into a scalar loss, matches central
    differences within 1e-4 relative error on inputs in [-2, 2]."""

    def _check(self, loss_fn, params, rng, n=25):
        assert fd_gradcheck(loss_fn, params, rng, n_coords=n) <= 1e-4

    def test_arithmetic_and_matmul(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (4, 5)))
        b = T.parameter(rng.uniform(-2, 2, (5, 3)))
        c = T.parameter(rng.uniform(-2, 2, (3,)))
        self._check(lambda: (((a @ b) + c) * ((a @ b) - c) / 3.1).sum(), [a, b, c], rng)

    def test_batched_matmul_broadcast(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (2, 1, 4, 3)))
        w = T.parameter(rng.uniform(-2, 2, (1, 5, 3, 3)))
        self._check(lambda: T.matmul(x, w).sum(), [x, w], rng)

    def test_softmax_masked(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (3, 6)))
        w = T.Tensor(rng.uniform(-1, 1, (3, 6)))
        mask = rng.uniform(size=(3, 6)) > 0.3
        mask[:, 0] = True
        self._check(lambda: (T.softmax(x, tau=0.7, axis=-1, mask=mask) * w).sum(),
                    [x], rng)

    def test_log_softmax(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (4, 7)))
        w = T.Tensor(rng.uniform(-1, 1, (4, 7)))
        self._check(lambda: (T.log_softmax(x) * w).sum(), [x], rng)

    def test_layer_norm(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (3, 4, 6)))
        g = T.parameter(rng.uniform(0.5, 1.5, 6))
        b = T.parameter(rng.uniform(-0.5, 0.5, 6))
        w = T.Tensor(rng.uniform(-1, 1, (3, 4, 6)))
        self._check(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b], rng)

    def test_gelu_tanh(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (5, 5)))
        self._check(lambda: (T.gelu(x) + T.tanh(x)).sum(), [x], rng)

    def test_l2_norm_and_normalize(self, rng):
        x = T.parameter(rng.uniform(0.5, 2, (4, 6)))
        w = T.Tensor(rng.uniform(-1, 1, (4, 6)))
        self._check(lambda: (T.l2_normalize(x) * w).sum() + T.l2_norm(x).sum(),
                    [x], rng)

    def test_masked_mean_pool(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (3, 5, 4)))
        mask = np.ones((3, 5))
        mask[0, 3:] = 0
        mask[2, 1:] = 0
        w = T.Tensor(rng.uniform(-1, 1, (3, 4)))
        self._check(lambda: (T.masked_mean_pool(x, mask) * w).sum(), [x], rng)

    def test_gathers_and_slicing(self, rng):
        table = T.parameter(rng.uniform(-2, 2, (9, 4)))
        ids = rng.integers(0, 9, size=(3, 5))
        pick = rng.integers(0, 4, size=(3, 5))
        pos = rng.integers(0, 5, size=3)

        def loss():
            x = T.gather_rows(table, ids)
            part = x[:, 1:, :]
            return (T.gather_index(x, pick).sum()
                    + T.take_positions(x, pos).sum() + part.sum())

        self._check(loss, [table], rng)

    def test_reductions_and_reshape(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (4, 3, 2)))
        self._check(lambda: (T.reshape(x, (4, 6)).mean(axis=1) * T.Tensor(np.arange(4.0))).sum()
                    + x.sum(axis=(1, 2)).sum() + T.swapaxes(x, 0, 2).mean(),
                    [x], rng)

    def test_cosine_similarity_matrix(self, rng):
        a = T.parameter(rng.uniform(0.5, 2, (3, 5)))
        b = T.parameter(rng.uniform(0.5, 2, (4, 5)))
        w = T.Tensor(rng.uniform(-1, 1, (3, 4)))
        self._check(lambda: (T.cosine_similarity_matrix(a, b) * w).sum(), [a, b], rng)


class TestDeterminism:
    def test_forward_replay_bit_identical(self, rng):
        x = rng.standard_normal((6, 6))
        w = rng.standard_normal((6, 6))

        def forward():
            t = T.Tensor(x)
            return (T.softmax(T.Tensor(w) @ t, tau=0.7) * T.gelu(t)).sum().item()

        assert forward() == forward()


def test_masked_mean_pool_empty_row():
    x = T.Tensor(np.ones((2, 3, 4)))
    mask = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(EmptySequenceError):
        T.masked_mean_pool(x, mask)
