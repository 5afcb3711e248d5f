"""Bit-packed {-1,+1} matrices and exact XNOR/popcount arithmetic.

Conventions, fixed once here and relied on everywhere else:

* a row of d values in {-1,+1} is packed LSB-first into little-endian uint64
  words; bit value 1 encodes +1, bit value 0 encodes -1;
* rows are padded up to a whole number of words and the padding bits are zero;
* for rows a, b the XNOR dot product is sum_k a_k b_k = d - 2 * popcount(a ^ b),
  and the Hamming distance is popcount(a ^ b) = (d - xnor_dot) / 2.

Products of {-1,+1} values are small integers, so every result here is exact;
tests compare against float dot products with zero tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _popcount

WORD_BITS = 64


def words_for(dim: int) -> int:
    """Number of uint64 words needed to hold dim bits."""
    return (dim + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True, eq=False)
class BitMatrix:
    """An (rows, dim) matrix over {-1,+1}, stored packed.

    `data` has shape (rows, words_for(dim)) and dtype uint64. Construct with
    `pack`; the constructor validates shape, dtype and zero padding so a
    BitMatrix can always be trusted by the kernels.
    """

    rows: int
    dim: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows < 0 or self.dim <= 0:
            raise ValueError(f"bad BitMatrix shape: rows={self.rows} dim={self.dim}")
        if self.data.dtype != np.uint64 or self.data.ndim != 2:
            raise ValueError("BitMatrix data must be a 2-d uint64 array")
        if self.data.shape != (self.rows, words_for(self.dim)):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"rows={self.rows} dim={self.dim}"
            )
        if not self.data.flags.c_contiguous:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))
        tail = self.dim % WORD_BITS
        if tail and self.rows:
            mask = np.uint64((1 << tail) - 1)
            if np.any(self.data[:, -1] & ~mask):
                raise ValueError("padding bits beyond dim must be zero")

    @property
    def words_per_row(self) -> int:
        return self.data.shape[1]

    def row(self, i: int) -> "BitMatrix":
        return BitMatrix(1, self.dim, self.data[i : i + 1])

    def take(self, idx: np.ndarray) -> "BitMatrix":
        """Gather rows by index (used to build edge tensors)."""
        idx = np.asarray(idx)
        return BitMatrix(int(idx.size), self.dim, np.ascontiguousarray(self.data[idx.ravel()]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BitMatrix)
            and self.rows == other.rows
            and self.dim == other.dim
            and np.array_equal(self.data, other.data)
        )


@dataclass
class RescaleTensor:
    """Learned scale Gamma applied to the integer output of a binary GEMM.

    kind "channel": one factor per output channel, Gamma = alpha[o].
    kind "rank1": rank-1 factorisation over (channel, point, neighbour) modes,
    Gamma[o, i, j] = alpha[o] * beta[i] * gamma[j], used by edge-message
    tensors of shape (points * neighbours, channels).
    """

    kind: str
    alpha: np.ndarray
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("channel", "rank1"):
            raise ValueError(f"unknown rescale kind: {self.kind!r}")
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1:
            raise ValueError("alpha must be 1-d (one factor per output channel)")
        if self.kind == "rank1":
            if self.beta is None or self.gamma is None:
                raise ValueError("rank1 rescale needs beta and gamma factors")
            self.beta = np.asarray(self.beta, dtype=np.float64)
            self.gamma = np.asarray(self.gamma, dtype=np.float64)
            if self.beta.ndim != 1 or self.gamma.ndim != 1:
                raise ValueError("beta and gamma must be 1-d")
        elif self.beta is not None or self.gamma is not None:
            raise ValueError("channel rescale takes alpha only")

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    def factors(self, rows: int) -> np.ndarray:
        """Dense factor array broadcastable against a (rows, channels) result.

        For "channel" this is alpha, independent of rows. For "rank1" the rows
        must enumerate (point, neighbour) pairs in row-major order; a whole
        multiple of len(beta) * len(gamma) rows is allowed and tiles the
        factors, which is how stacked multi-graph batches are handled.
        """
        if self.kind == "channel":
            return self.alpha
        period = self.beta.shape[0] * self.gamma.shape[0]
        if rows % period:
            raise ValueError(
                f"rank1 rescale covers multiples of {period} rows "
                f"({self.beta.shape[0]} points x {self.gamma.shape[0]} neighbours), "
                f"got {rows}"
            )
        row_scale = np.multiply.outer(self.beta, self.gamma).reshape(-1, 1)
        if rows != period:
            row_scale = np.tile(row_scale, (rows // period, 1))
        return row_scale * self.alpha[None, :]


def sign_quantize(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1, preserving dtype.

    Raises on NaN/Inf input; quantizing garbage should never pass silently.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("sign_quantize input contains non-finite values")
    out = np.where(x >= 0, np.array(1, dtype=x.dtype), np.array(-1, dtype=x.dtype))
    return out


def pack(x: np.ndarray) -> BitMatrix:
    """Pack a (rows, dim) or (dim,) array of exact {-1,+1} values."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("pack expects a 1-d or 2-d array")
    if x.shape[1] == 0:
        raise ValueError("cannot pack zero-width rows")
    if not np.all(np.abs(x) == 1):
        raise ValueError("pack expects values in {-1,+1}; quantize first")
    rows, dim = x.shape
    bits = (x > 0).astype(np.uint8)
    pad = (-dim) % WORD_BITS
    if pad:
        bits = np.concatenate([bits, np.zeros((rows, pad), np.uint8)], axis=1)
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = np.ascontiguousarray(packed.view(np.uint64).reshape(rows, -1))
    return BitMatrix(rows, dim, words)


def unpack(x: BitMatrix, dtype=np.float64) -> np.ndarray:
    """Inverse of `pack`: a dense (rows, dim) array of {-1,+1}."""
    raw = x.data.view(np.uint8).reshape(x.rows, -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : x.dim]
    return (bits.astype(dtype) * 2) - 1


def xnor_dot(a: BitMatrix, b: BitMatrix) -> int:
    """Exact dot product of two single-row bit matrices."""
    if a.rows != 1 or b.rows != 1:
        raise ValueError("xnor_dot takes single-row operands; use binary_gemm for batches")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    count = int(_popcount.xnor_counts(a.data, b.data)[0, 0])
    return a.dim - 2 * count


def hamming_distance(a: BitMatrix, b: BitMatrix) -> int:
    """Number of positions where two single-row bit matrices differ."""
    if a.rows != 1 or b.rows != 1:
        raise ValueError("hamming_distance takes single-row operands")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return int(_popcount.xnor_counts(a.data, b.data)[0, 0])


def xnor_counts(a: BitMatrix, b: BitMatrix) -> np.ndarray:
    """popcount(a_i XOR b_j) for all row pairs, (a.rows, b.rows) int32."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return _popcount.xnor_counts(a.data, b.data)


def binary_gemm(
    a: BitMatrix,
    b: BitMatrix,
    gamma: RescaleTensor | np.ndarray | float | None = None,
) -> np.ndarray:
    """Binary GEMM: float64 (a.rows, b.rows) matrix of XNOR dot products.

    `b` rows are the output channels (transposed-weight layout). The integer
    products dim - 2 * popcount(xor) are exact; `gamma` then rescales the
    result. Accepts a RescaleTensor, anything broadcastable, or None.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    counts = _popcount.xnor_counts(a.data, b.data)
    prod = (a.dim - 2 * counts).astype(np.float64)
    if gamma is None:
        return prod
    if isinstance(gamma, RescaleTensor):
        if gamma.channels != b.rows:
            raise ValueError(
                f"rescale has {gamma.channels} channels, GEMM produces {b.rows}"
            )
        return prod * gamma.factors(a.rows)
    return prod * gamma


def pairwise_hamming(x: BitMatrix) -> np.ndarray:
    """All-pairs Hamming distances, symmetric (n, n) int32 with zero diagonal."""
    return _popcount.pairwise_counts(x.data)


def xor_rows(a: BitMatrix, b: BitMatrix) -> BitMatrix:
    """Elementwise product -(a_i * b_i) per matched row, packed.

    In the {-1,+1} encoding the bitwise XOR of two rows is exactly the
    elementwise product negated, which is what edge tensors of binary
    features are built from.
    """
    if a.rows != b.rows or a.dim != b.dim:
        raise ValueError("xor_rows needs identically shaped operands")
    return BitMatrix(a.rows, a.dim, a.data ^ b.data)


def concat_bits(parts: list[BitMatrix]) -> BitMatrix:
    """Concatenate bit matrices along the feature axis (repacks via dense bits)."""
    if not parts:
        raise ValueError("nothing to concatenate")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ValueError("row counts differ")
    dense = np.concatenate([unpack(p, np.int8) for p in parts], axis=1)
    return pack(dense)
