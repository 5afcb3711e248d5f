"""Dynamic graph construction in Hamming space.

Edge convolutions rebuild their neighbourhood graph from the current
features at every layer. For sign-valued features the usual euclidean
kNN is overkill: on the hypersphere of {-1,+1} vectors, squared l2
distance is an affine function of the Hamming distance, so ranking by
either gives the same neighbours. This script shows the equivalence, then
builds a graph from packed bits alone and times the two routes.
"""

import time

import numpy as np

from bgnn.bitcore import pack, pairwise_hamming, sign_quantize
from bgnn.graph import knn_hamming, knn_l2, knn_score_matmul, pairwise_sq_l2

rng = np.random.default_rng(1)

print("== three routes to the same neighbours ==")
n, d, k = 200, 128, 8
x = sign_quantize(rng.standard_normal((n, d)))
by_l2 = knn_l2(x, k)
by_score = knn_score_matmul(x, k)
by_bits = knn_hamming(pack(x), k)
print(f"l2 vs similarity score: "
      f"{np.array_equal(by_l2.neighbours, by_score.neighbours)}")
print(f"similarity score vs packed Hamming: "
      f"{np.array_equal(by_score.neighbours, by_bits.neighbours)}")
assert np.array_equal(by_l2.neighbours, by_bits.neighbours)

print("\n== why: the distances are affinely related ==")
sq = pairwise_sq_l2(x)
ham = pairwise_hamming(pack(x))
print(f"sq_l2 == 4 * hamming everywhere: {np.array_equal(sq, 4.0 * ham)}")

print("\n== cost at graph-building size ==")
n, d = 1024, 256
x = sign_quantize(rng.standard_normal((n, d)))
xb = pack(x)
for fn, label in ((lambda: pairwise_sq_l2(x), "float l2"),
                  (lambda: pairwise_hamming(xb), "hamming")):
    fn()
    t0 = time.perf_counter()
    for _ in range(10):
        fn()
    print(f"{label:>9}: {(time.perf_counter() - t0) / 10 * 1e3:6.2f} ms "
          f"for all {n}x{n} pairs")

print("\nthe graph a binary layer needs never leaves bit space")
