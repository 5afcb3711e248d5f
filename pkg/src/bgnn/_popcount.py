"""Popcount compute backends.

Two implementations of the word-level XOR/popcount reductions that everything
else is built on: a numba path that lowers to the llvm.ctpop intrinsic (one
POPCNT instruction per word on x86), and a pure numpy path using
np.bitwise_count. The numba path is the default when it compiles; the numpy
path is the fallback and the reference both backends are tested against.

All functions take C-contiguous uint64 word arrays (rows are bit-rows, padding
bits already zero) and return int32 count matrices.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    HAVE_NUMBA = False

_BACKEND = "numba" if HAVE_NUMBA else "numpy"
_KERNELS = None

# Row-block size for the numpy fallback, chosen so the broadcast XOR buffer
# stays around 32 MB at bench sizes.
_NUMPY_BLOCK_BYTES = 1 << 25


def backend() -> str:
    """Name of the backend that will serve the next call."""
    return _BACKEND


def set_backend(name: str) -> None:
    """Force a backend ("numba" or "numpy"); used by tests and benchmarks."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown popcount backend: {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _BACKEND = name


def _build_kernels():
    """Compile the numba kernels on first use.

    Kept lazy so importing the package stays fast and a broken toolchain
    degrades to the numpy path instead of failing the import.
    """
    from llvmlite import ir
    from numba import njit, types, uint64
    from numba.extending import intrinsic

    @intrinsic
    def popcnt64(typingctx, x):
        sig = types.uint64(types.uint64)

        def codegen(context, builder, signature, args):
            fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
            return builder.call(fn, [args[0]])

        return sig, codegen

    @njit("void(uint64[:,::1], uint64[:,::1], int32[:,::1])", cache=True, nogil=True)
    def xnor_counts_kernel(a, b, out):
        m, w = a.shape
        n = b.shape[0]
        w4 = w - (w & 3)
        for i in range(m):
            ai = a[i]
            for j in range(n):
                bj = b[j]
                acc = uint64(0)
                t = 0
                while t < w4:
                    acc += (
                        popcnt64(ai[t] ^ bj[t])
                        + popcnt64(ai[t + 1] ^ bj[t + 1])
                        + popcnt64(ai[t + 2] ^ bj[t + 2])
                        + popcnt64(ai[t + 3] ^ bj[t + 3])
                    )
                    t += 4
                while t < w:
                    acc += popcnt64(ai[t] ^ bj[t])
                    t += 1
                out[i, j] = np.int32(acc)

    @njit("void(uint64[:,::1], int32[:,::1])", cache=True, nogil=True)
    def pairwise_counts_kernel(x, out):
        n, w = x.shape
        w4 = w - (w & 3)
        for i in range(n):
            out[i, i] = 0
            xi = x[i]
            for j in range(i + 1, n):
                xj = x[j]
                acc = uint64(0)
                t = 0
                while t < w4:
                    acc += (
                        popcnt64(xi[t] ^ xj[t])
                        + popcnt64(xi[t + 1] ^ xj[t + 1])
                        + popcnt64(xi[t + 2] ^ xj[t + 2])
                        + popcnt64(xi[t + 3] ^ xj[t + 3])
                    )
                    t += 4
                while t < w:
                    acc += popcnt64(xi[t] ^ xj[t])
                    t += 1
                out[i, j] = np.int32(acc)
                out[j, i] = np.int32(acc)

    @njit("void(uint64[:,::1], uint64[:,::1], int32[::1])", cache=True, nogil=True)
    def rowwise_counts_kernel(a, b, out):
        m, w = a.shape
        for i in range(m):
            acc = uint64(0)
            for t in range(w):
                acc += popcnt64(a[i, t] ^ b[i, t])
            out[i] = np.int32(acc)

    return xnor_counts_kernel, pairwise_counts_kernel, rowwise_counts_kernel


def _kernels():
    global _KERNELS, _BACKEND
    if _KERNELS is None:
        try:
            _KERNELS = _build_kernels()
        except Exception:  # pragma: no cover - toolchain failure path
            _BACKEND = "numpy"
            raise
    return _KERNELS


def xnor_counts(a_words: np.ndarray, b_words: np.ndarray) -> np.ndarray:
    """popcount(a_i XOR b_j) for every row pair, as an (m, n) int32 matrix."""
    if a_words.shape[1] != b_words.shape[1]:
        raise ValueError("word counts differ between operands")
    if _BACKEND == "numba":
        try:
            kern = _kernels()[0]
        except Exception:
            return _xnor_counts_numpy(a_words, b_words)
        out = np.empty((a_words.shape[0], b_words.shape[0]), np.int32)
        kern(a_words, b_words, out)
        return out
    return _xnor_counts_numpy(a_words, b_words)


def pairwise_counts(x_words: np.ndarray) -> np.ndarray:
    """popcount(x_i XOR x_j) for all pairs, as a symmetric (n, n) int32 matrix."""
    if _BACKEND == "numba":
        try:
            kern = _kernels()[1]
        except Exception:
            return _xnor_counts_numpy(x_words, x_words)
        out = np.empty((x_words.shape[0], x_words.shape[0]), np.int32)
        kern(x_words, out)
        return out
    return _xnor_counts_numpy(x_words, x_words)


def rowwise_counts(a_words: np.ndarray, b_words: np.ndarray) -> np.ndarray:
    """popcount(a_i XOR b_i) per matched row, as an (m,) int32 vector."""
    if a_words.shape != b_words.shape:
        raise ValueError("matched-row counts need identically shaped operands")
    if _BACKEND == "numba":
        try:
            kern = _kernels()[2]
        except Exception:
            return _rowwise_counts_numpy(a_words, b_words)
        out = np.empty(a_words.shape[0], np.int32)
        kern(a_words, b_words, out)
        return out
    return _rowwise_counts_numpy(a_words, b_words)


def _xnor_counts_numpy(a_words: np.ndarray, b_words: np.ndarray) -> np.ndarray:
    m, w = a_words.shape
    n = b_words.shape[0]
    out = np.empty((m, n), np.int32)
    block = max(1, _NUMPY_BLOCK_BYTES // max(1, n * w * 8))
    for i0 in range(0, m, block):
        xored = a_words[i0 : i0 + block, None, :] ^ b_words[None, :, :]
        out[i0 : i0 + block] = np.bitwise_count(xored).sum(axis=2, dtype=np.int32)
    return out


def _rowwise_counts_numpy(a_words: np.ndarray, b_words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a_words ^ b_words).sum(axis=1, dtype=np.int32)
