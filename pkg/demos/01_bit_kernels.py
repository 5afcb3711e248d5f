"""Bit-packed kernels from the ground up.

A {-1,+1} matrix packs 64 entries per machine word. Two packed rows
multiply via XOR and popcount: xor flips exactly the positions where the
rows disagree, so popcount(xor) counts disagreements, and the dot product
falls out as d - 2*mismatches. This script packs a small matrix, walks
through that identity by hand, then checks the packed GEMM against plain
numpy and times both at a realistic size.
"""

import time

import numpy as np

from bgnn.bitcore import (
    binary_gemm,
    hamming_distance,
    pack,
    sign_quantize,
    unpack,
    xnor_dot,
)

rng = np.random.default_rng(0)

print("== packing ==")
x = sign_quantize(rng.standard_normal((4, 70)))
bits = pack(x)
print(f"{x.shape[0]} rows x {x.shape[1]} signs -> "
      f"{bits.data.shape[1]} words per row "
      f"({bits.data.nbytes} bytes instead of {x.nbytes})")
assert np.array_equal(unpack(bits), x), "pack/unpack must round-trip"

print("\n== one dot product, by hand ==")
a, b = x[0], x[1]
mismatches = int((a != b).sum())
d = a.shape[0]
print(f"rows disagree in {mismatches} of {d} positions")
print(f"dot product: d - 2*mismatches = {d - 2 * mismatches}")
pa, pb = pack(a[None]), pack(b[None])
print(f"xnor_dot says {xnor_dot(pa, pb)}, "
      f"hamming_distance says {hamming_distance(pa, pb)}")
assert xnor_dot(pa, pb) == int(a @ b)

print("\n== packed GEMM against numpy ==")
m, n, d = 512, 256, 512
aa = sign_quantize(rng.standard_normal((m, d)))
bb = sign_quantize(rng.standard_normal((n, d)))
pa, pb = pack(aa), pack(bb)
exact = np.array_equal(binary_gemm(pa, pb), aa @ bb.T)
print(f"binary_gemm == float product on {m}x{n}x{d}: {exact}")
assert exact

for fn, label in ((lambda: aa @ bb.T, "float"),
                  (lambda: binary_gemm(pa, pb), "binary")):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(10):
        fn()
    print(f"{label:>7}: {(time.perf_counter() - t0) / 10 * 1e3:6.2f} ms")

print("\nsame numbers, a fraction of the bytes and the time")
