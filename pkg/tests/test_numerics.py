import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ensadapt.errors import ContractError
from ensadapt.numerics import (
    BNState,
    batchnorm_forward,
    cosine_rows,
    matmul,
    stable_softmax_rows,
)


def triple_loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_hand_sum(self):
        out = matmul([[1.0, 2.0]], [[3.0], [4.0]])
        assert out.shape == (1, 1)
        assert out[0, 0] == 11.0

    def test_matches_triple_loop_exactly(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        assert np.array_equal(matmul(a, b), triple_loop_matmul(a, b))

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError, match=r"\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-100, 100)),
        arrays(np.float64, (4, 2), elements=st.floats(-100, 100)),
    )
    @settings(max_examples=50, deadline=None)
    def test_triple_loop_property(self, a, b):
        assert np.array_equal(matmul(a, b), triple_loop_matmul(a, b))


class TestSoftmax:
    def test_uniform(self):
        out = stable_softmax_rows([[0.0, 0.0, 0.0]])
        assert np.allclose(out, 1.0 / 3.0, atol=1e-15)

    def test_no_overflow(self):
        out = stable_softmax_rows([[1000.0, 0.0]])
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0)

    def test_high_precision_oracle(self):
        # frozen from a 50-digit evaluation of exp(x)/sum(exp(x)) at [1,2,3]
        expected = [0.090030573170380458, 0.24472847105479765, 0.66524095577482189]
        out = stable_softmax_rows([[1.0, 2.0, 3.0]])
        assert np.allclose(out[0], expected, rtol=1e-14, atol=0)

    def test_nan_rejected(self):
        with pytest.raises(ContractError):
            stable_softmax_rows([[np.nan, 0.0]])

    @given(arrays(np.float64, (5, 4), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one(self, m):
        out = stable_softmax_rows(m)
        assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
        # entries may underflow to 0 for extreme gaps; never negative or > 1
        assert np.all(out >= 0) and np.all(out <= 1)


class TestCosine:
    def test_self_similarity(self):
        x = np.array([[1.0, 2.0, -3.0]])
        assert cosine_rows(x, x)[0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal(self):
        out = cosine_rows([[1.0, 0.0]], [[0.0, 1.0]])
        assert out[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_high_precision_oracle(self):
        # frozen from a 50-digit evaluation of <q,k>/(|q||k|)
        out = cosine_rows([[1.0, 2.0]], [[3.0, 4.0]])
        assert out[0, 0] == pytest.approx(0.98386991009990747, rel=1e-12)

    def test_zero_row_is_safe(self):
        out = cosine_rows([[0.0, 0.0]], [[1.0, 1.0]])
        assert out[0, 0] == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(4, 6))
        k = rng.normal(size=(5, 6))
        assert np.allclose(cosine_rows(q, k), cosine_rows(k, q).T, atol=1e-12)

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(3, 5))
        k = rng.normal(size=(4, 5))
        for c in (1e-3, 0.5, 7.0, 1e4):
            assert np.allclose(cosine_rows(c * q, k), cosine_rows(q, k), atol=1e-9)

    def test_range(self):
        rng = np.random.default_rng(3)
        out = cosine_rows(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)))
        assert np.all(out >= -1 - 1e-9) and np.all(out <= 1 + 1e-9)


class TestBatchNorm:
    def test_identity_on_whitened_batch(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        out = batchnorm_forward(x, np.ones(3), np.zeros(3), BNState.fresh(3), "train")
        assert np.allclose(out, x, atol=1e-5)

    def test_zero_scale_gives_shift(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 2))
        shift = np.array([1.5, -2.0])
        out = batchnorm_forward(x, np.zeros(2), shift, BNState.fresh(2), "train")
        assert np.allclose(out, shift)

    def test_two_pass_oracle(self):
        x = np.array([[1.0, 10.0], [2.0, 20.0], [4.0, 0.0], [5.0, 30.0]])
        scale = np.array([1.5, 0.5])
        shift = np.array([0.0, 1.0])
        state = BNState.fresh(2)
        out = batchnorm_forward(x, scale, shift, state, "train")
        mean = x.sum(axis=0) / 4.0
        var = ((x - mean) ** 2).sum(axis=0) / 4.0
        expected = (x - mean) / np.sqrt(var + state.eps) * scale + shift
        assert np.allclose(out, expected, atol=1e-12)
        # running stats: momentum 0.1, unbiased-corrected variance
        assert np.allclose(state.running_mean, 0.1 * mean)
        assert np.allclose(state.running_var, 0.9 + 0.1 * var * 4.0 / 3.0)

    def test_normalized_statistics(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(64, 5)) * 3.0 + 2.0
        out = batchnorm_forward(x, np.ones(5), np.zeros(5), BNState.fresh(5), "train")
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-6)
        assert np.allclose(out.var(axis=0), 1.0, atol=1e-3)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ContractError, match="batch size"):
            batchnorm_forward(np.ones((1, 2)), np.ones(2), np.zeros(2),
                              BNState.fresh(2), "train")

    def test_eval_uses_running_stats(self):
        state = BNState(np.array([1.0]), np.array([4.0]))
        out = batchnorm_forward(np.array([[3.0]]), np.ones(1), np.zeros(1),
                                state, "eval")
        assert out[0, 0] == pytest.approx(2.0 / np.sqrt(4.0 + state.eps))
