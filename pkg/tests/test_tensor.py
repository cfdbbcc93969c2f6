import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamkv import tensor as T
from streamkv.errors import ConfigError, DegenerateInputError, MaskError, ShapeError


def naive_matmul(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            out[i][j] = sum(float(a[i][p]) * float(b[p][j]) for p in range(k))
    return np.array(out)


def naive_attention(q, k, v, ranges):
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i, (s, e) in enumerate(ranges):
        logits = [sum(float(q[i, c]) * float(k[j, c]) for c in range(d)) / math.sqrt(d) for j in range(s, e)]
        m = max(logits)
        w = [math.exp(x - m) for x in logits]
        z = sum(w)
        for jj, j in enumerate(range(s, e)):
            out[i] += (w[jj] / z) * v[j].astype(np.float64)
    return out


def rotation_matrix_rope(x, pos, head_dim, base=10000.0):
    """Apply RoPE by building the explicit block-diagonal rotation matrix."""
    width = x.shape[0]
    R = np.zeros((width, width))
    for h in range(width // head_dim):
        for i in range(head_dim // 2):
            theta = pos * base ** (-2 * i / head_dim)
            c, s = math.cos(theta), math.sin(theta)
            a = h * head_dim + 2 * i
            R[a:a + 2, a:a + 2] = [[c, -s], [s, c]]
    return R @ x.astype(np.float64)


class TestMatmul:
    def test_identity(self):
        m = np.arange(6, dtype=np.float32).reshape(3, 2)
        np.testing.assert_array_equal(T.matmul(np.eye(3), m), m)

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(T.matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_random_vs_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_zero_rows(self):
        assert T.matmul(np.zeros((0, 3)), np.zeros((3, 4))).shape == (0, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 11), st.integers(0, 2**31))
    def test_row_bits_independent_of_batch(self, n, pick, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n, 16)).astype(np.float32)
        b = rng.standard_normal((16, 8)).astype(np.float32)
        i = pick % n
        np.testing.assert_array_equal(T.matmul(a, b)[i], T.matmul(a[i:i + 1], b)[0])


class TestSoftmax:
    def test_zeros(self):
        np.testing.assert_allclose(T.softmax_row([0, 0, 0, 0]), [0.25] * 4)

    def test_large_input_no_overflow(self):
        np.testing.assert_allclose(T.softmax_row([1000.0, 0.0]), [1.0, 0.0], atol=1e-6)

    def test_vs_float64_reference(self):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(T.softmax_row(x), ref, atol=1e-6)

    def test_empty(self):
        with pytest.raises(ShapeError):
            T.softmax_row([])

    @given(arrays(np.float32, st.integers(1, 20), elements=st.floats(-50, 50, width=32)))
    def test_sums_to_one(self, x):
        assert abs(float(T.softmax_row(x).astype(np.float64).sum()) - 1.0) < 1e-5


class TestCosine:
    def test_identical(self):
        assert T.cosine_sim([1, 0], [1, 0]) == 1.0

    def test_orthogonal(self):
        assert T.cosine_sim([1, 0], [0, 1]) == 0.0

    def test_vs_scalar_loop(self):
        u, v = [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]
        dot = 0.0
        nu = nv = 0.0
        for a, b in zip(u, v):
            dot += a * b
            nu += a * a
            nv += b * b
        assert dot == 32.0
        assert abs(T.cosine_sim(u, v) - dot / (math.sqrt(nu) * math.sqrt(nv))) < 1e-6

    def test_temperature_divides(self):
        assert abs(T.cosine_sim([1, 0], [1, 0], tau=0.5) - 2.0) < 1e-12

    def test_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            T.cosine_sim([0, 0], [1, 0])
        with pytest.raises(DegenerateInputError):
            T.cosine_scores(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1.0, 0.0]))

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            T.cosine_sim([1, 0], [1, 0], tau=0)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(1)
        c, q = rng.standard_normal((10, 5)), rng.standard_normal(5)
        ref = [T.cosine_sim(row, q, 0.07) for row in c]
        np.testing.assert_allclose(T.cosine_scores(c, q, 0.07), ref, rtol=1e-12)

    @pytest.mark.parametrize("dim", [2, 7, 31, 64])
    def test_equal_rows_equal_bits(self, dim):
        rng = np.random.default_rng(dim)
        rows = rng.standard_normal((3, dim)).astype(np.float32)
        c = rows[rng.integers(0, 3, 257)]
        q = rng.standard_normal(dim).astype(np.float32)
        scores = T.cosine_scores(c, q)
        for k in range(3):
            same = scores[(c == rows[k]).all(axis=1)]
            assert (same == same[0]).all()
        assert T.cosine_scores(c[5:6], q)[0] == scores[5]

    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)))
    def test_bounded(self, u, v):
        if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
            return
        assert -1 - 1e-9 <= T.cosine_sim(u, v) <= 1 + 1e-9


class TestRope:
    def test_position_zero_identity(self):
        x = np.random.default_rng(2).standard_normal(32).astype(np.float32)
        np.testing.assert_array_equal(T.rope_apply(x, 0, 16), x)

    @pytest.mark.parametrize("p", [1, 100, 15000])
    def test_norm_preserved(self, p):
        x = np.random.default_rng(p).standard_normal(32).astype(np.float32)
        assert abs(np.linalg.norm(T.rope_apply(x, p, 16)) - np.linalg.norm(x)) < 1e-5

    def test_vs_rotation_matrix(self):
        x = np.random.default_rng(3).standard_normal(32).astype(np.float32)
        np.testing.assert_allclose(T.rope_apply(x, 5, 16), rotation_matrix_rope(x, 5, 16), atol=1e-6)

    def test_negative_undoes(self):
        x = np.random.default_rng(4).standard_normal((3, 32)).astype(np.float32)
        pos = np.array([7, 300, 12000])
        back = T.rope_rotate(T.rope_rotate(x, pos, 16), -pos, 16)
        np.testing.assert_allclose(back, x, atol=1e-5)

    def test_odd_head_dim(self):
        with pytest.raises(ConfigError):
            T.rope_rotate(np.zeros((1, 6)), [0], 3)

    @settings(max_examples=40)
    @given(st.integers(0, 5000), st.integers(0, 5000), st.integers(0, 2**31))
    def test_dot_depends_on_relative_distance(self, m, n, seed):
        rng = np.random.default_rng(seed)
        q, k = rng.standard_normal(16), rng.standard_normal(16)
        shift = 37
        a = float(np.dot(T.rope_apply(q, m, 16).astype(np.float64), T.rope_apply(k, n, 16)))
        b = float(np.dot(T.rope_apply(q, m + shift, 16).astype(np.float64), T.rope_apply(k, n + shift, 16)))
        assert abs(a - b) < 1e-3


class TestAttention:
    def test_single_key(self):
        v = np.array([[3.0, -1.0]])
        out = T.scaled_dot_attention([[0.5, 0.5]], [[1.0, 2.0]], v, [(0, 1)])
        np.testing.assert_allclose(out, v)

    def test_uniform_keys_average_values(self):
        rng = np.random.default_rng(5)
        k = np.tile(rng.standard_normal(4), (5, 1))
        v = rng.standard_normal((5, 3))
        out = T.scaled_dot_attention(rng.standard_normal((1, 4)), k, v, [(1, 4)])
        np.testing.assert_allclose(out[0], v[1:4].mean(axis=0), atol=1e-6)

    def test_causal_vs_naive(self):
        rng = np.random.default_rng(6)
        q, k, v = (rng.standard_normal((6, 8)).astype(np.float32) for _ in range(3))
        ranges = T.causal_ranges(6, 0)
        np.testing.assert_allclose(T.scaled_dot_attention(q, k, v, ranges), naive_attention(q, k, v, ranges),
                                   atol=1e-6)

    def test_empty_range(self):
        with pytest.raises(MaskError):
            T.scaled_dot_attention(np.ones((1, 2)), np.ones((2, 2)), np.ones((2, 2)), [(1, 1)])

    def test_weights_rows(self):
        _, w = T.scaled_dot_attention(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)),
                                      T.causal_ranges(3, 0), return_weights=True)
        assert [int((row > 0).sum()) for row in w] == [1, 2, 3]

    def test_multihead_splits(self):
        rng = np.random.default_rng(7)
        q, k, v = (rng.standard_normal((4, 8)).astype(np.float32) for _ in range(3))
        ranges = T.causal_ranges(4, 0)
        out = T.multihead_attention(q, k, v, ranges, 2)
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            np.testing.assert_allclose(out[:, sl], naive_attention(q[:, sl], k[:, sl], v[:, sl], ranges), atol=1e-6)
