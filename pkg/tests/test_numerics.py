import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sampledom.numerics import AdamWState, ShapeError, adamw_step, gaussian_noise, make_rng, matmul


def triple_loop(a, b):
    out = [[0.0] * len(b[0]) for _ in range(len(a))]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += a[i][k] * b[k][j]
    return np.array(out)


class TestMatmul:
    def test_identity(self):
        a = make_rng(1).normal(size=(2, 2))
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_hand_example(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])

    def test_matches_triple_loop(self):
        rng = make_rng(7)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a.tolist(), b.tolist()), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"2x3.*2x3"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_inputs_unmodified(self):
        a, b = np.ones((2, 2)), np.full((2, 2), 2.0)
        matmul(a, b)
        assert a.sum() == 4 and b.sum() == 8

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_associativity(self, m, n, p, q, seed):
        rng = make_rng(seed)
        a, b, c = rng.normal(size=(m, n)), rng.normal(size=(n, p)), rng.normal(size=(p, q))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(left).max()))


class TestAdamW:
    def test_zero_grad_no_decay_is_fixed_point(self):
        p = [np.array([[1.5, -2.0]])]
        adamw_step(p, [np.zeros((1, 2))], AdamWState(weight_decay=0.0))
        np.testing.assert_array_equal(p[0], [[1.5, -2.0]])

    def test_first_step_moves_by_lr(self):
        # step 1: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps)
        p = [np.array([[0.5]])]
        state = AdamWState(lr=0.001, weight_decay=0.0)
        adamw_step(p, [np.array([[1.0]])], state)
        expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8)
        assert p[0][0, 0] == pytest.approx(expected, abs=1e-15)
        assert state.step == 1

    def test_matches_hand_recurrence_over_steps(self):
        grads = [0.3, -1.2, 0.7, 0.0, 2.5]
        lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta * (1 - lr * wd)
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        p = [np.array([1.0])]
        state = AdamWState(lr=lr, weight_decay=wd)
        for g in grads:
            adamw_step(p, [np.array([g])], state)
        assert p[0][0] == pytest.approx(theta, abs=1e-14)
        assert state.step == len(grads)

    def test_decay_only_shrinks(self):
        p = [np.array([3.0, -3.0])]
        state = AdamWState(weight_decay=0.01)
        for _ in range(3):
            before = np.abs(p[0]).copy()
            adamw_step(p, [np.zeros(2)], state)
            assert np.all(np.abs(p[0]) < before)

    def test_lr_zero_is_identity(self):
        rng = make_rng(3)
        p = [rng.normal(size=(3, 4)), rng.normal(size=4)]
        before = [x.copy() for x in p]
        state = AdamWState(lr=0.0, weight_decay=0.0)
        for _ in range(4):
            adamw_step(p, [rng.normal(size=(3, 4)), rng.normal(size=4)], state)
        for a, b in zip(p, before):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adamw_step([np.zeros((2, 2))], [np.zeros((2, 3))], AdamWState())
        state = AdamWState()
        adamw_step([np.zeros(2)], [np.zeros(2)], state)
        with pytest.raises(ShapeError):
            adamw_step([np.zeros(3)], [np.zeros(3)], state)


class TestGaussianNoise:
    def test_zero_sigma(self):
        assert not gaussian_noise(make_rng(0), 3, 4, 0.0).any()

    def test_moments(self):
        x = gaussian_noise(make_rng(11), 1000, 100, 1.0)
        assert abs(x.mean()) < 0.02
        assert abs(x.std() - 1.0) < 0.02

    def test_deterministic(self):
        np.testing.assert_array_equal(gaussian_noise(make_rng(5), 4, 4, 2.0), gaussian_noise(make_rng(5), 4, 4, 2.0))

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_noise(make_rng(0), 2, 2, -1.0)
