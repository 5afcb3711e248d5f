"""Exactness tests for packing and XNOR/popcount arithmetic.

The oracle throughout is plain float64 linear algebra on the unpacked
{-1,+1} values: products of signs are small integers, float64 represents
them exactly, so every comparison is zero-tolerance.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgnn import _popcount
from bgnn.bitcore import (
    BitMatrix,
    RescaleTensor,
    WORD_BITS,
    binary_gemm,
    concat_bits,
    hamming_distance,
    pack,
    pairwise_hamming,
    sign_quantize,
    unpack,
    words_for,
    xnor_dot,
    xor_rows,
)


def random_signs(rng, rows, dim, dtype=np.float64):
    return rng.choice(np.array([-1.0, 1.0], dtype=dtype), size=(rows, dim))


class TestSignQuantize:
    def test_zero_maps_to_plus_one(self):
        out = sign_quantize(np.array([-2.0, -0.0, 0.0, 0.5]))
        assert out.tolist() == [-1.0, 1.0, 1.0, 1.0]

    def test_preserves_float_dtype(self):
        x = np.array([0.25, -3.0], dtype=np.float32)
        assert sign_quantize(x).dtype == np.float32

    def test_integers_promote_to_float(self):
        assert sign_quantize(np.array([3, -2])).dtype == np.float64

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            sign_quantize(np.array([1.0, bad]))

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 7))
        once = sign_quantize(x)
        assert np.array_equal(sign_quantize(once), once)


class TestPackUnpack:
    @pytest.mark.parametrize("dim", [1, 2, 63, 64, 65, 127, 128, 1000, 1024])
    def test_roundtrip(self, dim):
        rng = np.random.default_rng(dim)
        x = random_signs(rng, 7, dim)
        bm = pack(x)
        assert bm.rows == 7 and bm.dim == dim
        assert bm.words_per_row == words_for(dim)
        assert np.array_equal(unpack(bm), x)

    def test_padding_bits_are_zero(self):
        x = np.ones((3, 70))
        bm = pack(x)
        tail = bm.dim % WORD_BITS
        mask = np.uint64((1 << tail) - 1)
        assert np.all(bm.data[:, -1] & ~mask == 0)

    def test_one_dim_input_becomes_single_row(self):
        bm = pack(np.array([1.0, -1.0, 1.0]))
        assert bm.rows == 1 and bm.dim == 3

    def test_rejects_non_sign_values(self):
        with pytest.raises(ValueError):
            pack(np.array([[1.0, 0.5]]))
        with pytest.raises(ValueError):
            pack(np.array([[1.0, 0.0]]))

    def test_rejects_bad_rank(self):
        with pytest.raises(ValueError):
            pack(np.ones((2, 2, 2)))

    def test_constructor_rejects_dirty_padding(self):
        bm = pack(np.ones((2, 3)))
        dirty = bm.data.copy()
        dirty[0, 0] |= np.uint64(1) << np.uint64(10)
        with pytest.raises(ValueError):
            BitMatrix(2, 3, dirty)

    def test_unpack_dtype(self):
        bm = pack(np.ones((1, 5)))
        assert unpack(bm, np.float32).dtype == np.float32

    def test_row_and_take(self):
        rng = np.random.default_rng(3)
        x = random_signs(rng, 6, 10)
        bm = pack(x)
        assert np.array_equal(unpack(bm.row(4)), x[4:5])
        idx = np.array([5, 0, 0, 2])
        assert np.array_equal(unpack(bm.take(idx)), x[idx])

    def test_equality(self):
        x = random_signs(np.random.default_rng(4), 3, 9)
        assert pack(x) == pack(x)
        assert pack(x) != pack(-x)

    @settings(max_examples=40, deadline=None)
    @given(
        rows=st.integers(1, 5),
        dim=st.integers(1, 200),
        seed=st.integers(0, 2**20),
    )
    def test_roundtrip_property(self, rows, dim, seed):
        x = random_signs(np.random.default_rng(seed), rows, dim)
        assert np.array_equal(unpack(pack(x)), x)


class TestXnorDot:
    def test_against_float_dot_d1000(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            a = random_signs(rng, 1, 1000)
            b = random_signs(rng, 1, 1000)
            assert xnor_dot(pack(a), pack(b)) == int(a[0] @ b[0])

    def test_identity_and_negation(self):
        a = pack(random_signs(np.random.default_rng(7), 1, 130))
        na = pack(-unpack(a))
        assert xnor_dot(a, a) == 130
        assert xnor_dot(a, na) == -130

    def test_shape_checks(self):
        two = pack(np.ones((2, 8)))
        one = pack(np.ones((1, 8)))
        other = pack(np.ones((1, 9)))
        with pytest.raises(ValueError):
            xnor_dot(two, one)
        with pytest.raises(ValueError):
            xnor_dot(one, other)


class TestHamming:
    def test_dot_hamming_identity(self):
        rng = np.random.default_rng(11)
        for dim in (5, 64, 200):
            a = pack(random_signs(rng, 1, dim))
            b = pack(random_signs(rng, 1, dim))
            h = hamming_distance(a, b)
            assert xnor_dot(a, b) == dim - 2 * h
            assert hamming_distance(a, a) == 0
            assert hamming_distance(b, a) == h

    def test_pairwise_against_naive(self):
        rng = np.random.default_rng(12)
        x = random_signs(rng, 64, 256)
        bm = pack(x)
        got = pairwise_hamming(bm)
        naive = np.array(
            [[int(np.sum(x[i] != x[j])) for j in range(64)] for i in range(64)]
        )
        assert np.array_equal(got, naive)
        assert np.array_equal(np.diag(got), np.zeros(64, dtype=got.dtype))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(13)
        x = pack(random_signs(rng, 10, 77))
        h = pairwise_hamming(x)
        for i in range(10):
            for j in range(10):
                for l in range(10):
                    assert h[i, j] <= h[i, l] + h[l, j]


class TestBinaryGemm:
    def test_against_float_matmul(self):
        rng = np.random.default_rng(21)
        a = random_signs(rng, 8, 32)
        w = random_signs(rng, 4, 32)
        got = binary_gemm(pack(a), pack(w))
        assert got.dtype == np.float64
        assert np.array_equal(got, a @ w.T)

    def test_scalar_and_array_gamma(self):
        rng = np.random.default_rng(22)
        a = random_signs(rng, 6, 40)
        w = random_signs(rng, 3, 40)
        base = a @ w.T
        assert np.array_equal(binary_gemm(pack(a), pack(w), 0.5), base * 0.5)
        col = np.array([1.0, 2.0, 4.0])
        assert np.array_equal(binary_gemm(pack(a), pack(w), col), base * col)

    def test_channel_rescale(self):
        rng = np.random.default_rng(23)
        a = random_signs(rng, 5, 16)
        w = random_signs(rng, 3, 16)
        gamma = RescaleTensor("channel", np.array([0.5, 1.0, 2.0]))
        got = binary_gemm(pack(a), pack(w), gamma)
        assert np.array_equal(got, (a @ w.T) * gamma.alpha)

    def test_rank1_rescale_matches_outer_product(self):
        rng = np.random.default_rng(24)
        points, neigh, cin, cout = 4, 3, 16, 5
        a = random_signs(rng, points * neigh, cin)
        w = random_signs(rng, cout, cin)
        alpha = rng.uniform(0.5, 2.0, cout)
        beta = rng.uniform(0.5, 2.0, points)
        gam = rng.uniform(0.5, 2.0, neigh)
        got = binary_gemm(pack(a), pack(w), RescaleTensor("rank1", alpha, beta, gam))
        full = np.einsum("o,i,j->ijo", alpha, beta, gam).reshape(points * neigh, cout)
        assert np.allclose(got, (a @ w.T) * full, rtol=1e-14, atol=0)

    def test_rank1_row_count_mismatch(self):
        gamma = RescaleTensor("rank1", np.ones(2), np.ones(3), np.ones(4))
        a = pack(np.ones((5, 8)))
        w = pack(np.ones((2, 8)))
        with pytest.raises(ValueError):
            binary_gemm(a, w, gamma)

    def test_channel_count_mismatch(self):
        gamma = RescaleTensor("channel", np.ones(3))
        with pytest.raises(ValueError):
            binary_gemm(pack(np.ones((2, 8))), pack(np.ones((2, 8))), gamma)

    @settings(max_examples=25, deadline=None)
    @given(
        m=st.integers(1, 6),
        n=st.integers(1, 6),
        dim=st.integers(1, 150),
        seed=st.integers(0, 2**20),
    )
    def test_gemm_property(self, m, n, dim, seed):
        rng = np.random.default_rng(seed)
        a = random_signs(rng, m, dim)
        w = random_signs(rng, n, dim)
        assert np.array_equal(binary_gemm(pack(a), pack(w)), a @ w.T)


class TestRescaleTensor:
    def test_validation(self):
        with pytest.raises(ValueError):
            RescaleTensor("weird", np.ones(2))
        with pytest.raises(ValueError):
            RescaleTensor("rank1", np.ones(2))
        with pytest.raises(ValueError):
            RescaleTensor("channel", np.ones(2), beta=np.ones(2))
        with pytest.raises(ValueError):
            RescaleTensor("channel", np.ones((2, 2)))


class TestRowOps:
    def test_xor_rows_is_negated_product(self):
        rng = np.random.default_rng(31)
        a = random_signs(rng, 9, 100)
        b = random_signs(rng, 9, 100)
        got = unpack(xor_rows(pack(a), pack(b)))
        assert np.array_equal(got, -(a * b))

    def test_concat_bits(self):
        rng = np.random.default_rng(32)
        a = random_signs(rng, 4, 70)
        b = random_signs(rng, 4, 30)
        got = concat_bits([pack(a), pack(b)])
        assert np.array_equal(unpack(got), np.concatenate([a, b], axis=1))


class TestBackends:
    def test_numpy_backend_matches(self, monkeypatch):
        rng = np.random.default_rng(41)
        a = random_signs(rng, 17, 300)
        w = random_signs(rng, 9, 300)
        pa, pw = pack(a), pack(w)
        default = binary_gemm(pa, pw)
        ph_default = pairwise_hamming(pa)
        monkeypatch.setattr(_popcount, "_BACKEND", "numpy")
        assert _popcount.backend() == "numpy"
        assert np.array_equal(binary_gemm(pa, pw), default)
        assert np.array_equal(pairwise_hamming(pa), ph_default)

    def test_rowwise_counts_agree(self, monkeypatch):
        rng = np.random.default_rng(42)
        a = pack(random_signs(rng, 13, 129))
        b = pack(random_signs(rng, 13, 129))
        fast = _popcount.rowwise_counts(a.data, b.data)
        monkeypatch.setattr(_popcount, "_BACKEND", "numpy")
        slow = _popcount.rowwise_counts(a.data, b.data)
        assert np.array_equal(fast, slow)

    def test_set_backend_validates(self):
        with pytest.raises(ValueError):
            _popcount.set_backend("cuda")
