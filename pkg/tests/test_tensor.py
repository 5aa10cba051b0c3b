import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import argmax_scan, matmul_loops
from volseq.errors import ShapeError
from volseq.tensor import (
    activation, activation_grad, argmax_last, as_tensor, flat_offset, flip, matmul, sigmoid, unravel,
)

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=5)


class TestLayout:
    @given(shapes, st.data())
    def test_offset_round_trip(self, shape, data):
        index = tuple(data.draw(st.integers(0, n - 1)) for n in shape)
        off = flat_offset(index, shape)
        assert unravel(off, shape) == index
        assert np.arange(int(np.prod(shape))).reshape(shape)[index] == off

    def test_offset_out_of_range(self):
        with pytest.raises(IndexError):
            flat_offset((2, 0), (2, 3))

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            as_tensor(np.zeros((1,) * 6))
        assert as_tensor([1, 2]).dtype == np.float64


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_example(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal(out, [[2.0], [4.0]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
            matmul(np.zeros((2, 3)), np.zeros((4, 1)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_matches_loops(self, m, k, n, seed):
        # integer-valued data: every summation order is exact
        r = np.random.default_rng(seed)
        a = r.integers(-9, 10, size=(m, k)).astype(float)
        b = r.integers(-9, 10, size=(k, n)).astype(float)
        np.testing.assert_array_equal(matmul(a, b), matmul_loops(a, b))

    def test_inputs_untouched(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
        a0, b0 = a.copy(), b.copy()
        matmul(a, b)
        np.testing.assert_array_equal(a, a0)
        np.testing.assert_array_equal(b, b0)


class TestActivation:
    def test_values(self):
        assert activation(np.array([0.0]), "sigmoid")[0] == 0.5
        assert activation(np.array([0.0]), "tanh")[0] == 0.0
        np.testing.assert_array_equal(activation(np.array([-3.2, 1.5]), "relu"), [0.0, 1.5])

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "linear"])
    def test_grad_matches_difference(self, kind, rng):
        x = rng.normal(size=20)
        h = 1e-6
        num = (activation(x + h, kind) - activation(x - h, kind)) / (2 * h)
        np.testing.assert_allclose(activation_grad(x, activation(x, kind), kind), num, atol=1e-8)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation(np.zeros(2), "swish")


class TestFlip:
    def test_reversal(self):
        np.testing.assert_array_equal(flip(np.array([1.0, 2.0, 3.0]), 0), [3.0, 2.0, 1.0])

    def test_involution(self, rng):
        x = rng.normal(size=(3, 4, 5))
        for axis in range(3):
            np.testing.assert_array_equal(flip(flip(x, axis), axis), x)

    def test_index_remap_oracle(self, rng):
        x = rng.normal(size=(4, 4, 4))
        y = flip(x, 0)
        for i, j, k in np.ndindex(4, 4, 4):
            assert y[i, j, k] == x[3 - i, j, k]

    def test_bad_axis(self):
        with pytest.raises(IndexError):
            flip(np.zeros((2, 2)), 2)


class TestArgmax:
    def test_examples(self):
        assert argmax_last(np.array([[0.1, 0.7, 0.1, 0.1]])) == [1]
        assert argmax_last(np.full((1, 4), 0.25)) == [0]

    def test_scan_oracle(self, rng):
        # coarse values force plenty of ties
        x = rng.integers(0, 4, size=(100, 5)).astype(float)
        assert argmax_last(x) == [argmax_scan(row) for row in x]
