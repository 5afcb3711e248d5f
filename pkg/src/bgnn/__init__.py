"""Binary graph neural networks on bit-packed features.

Exact XNOR/popcount kernels, Hamming-space dynamic graph construction,
binarized edge-convolution and SAGE operators, a cascaded distillation
trainer, and a compact model file format.
"""

__version__ = "0.1.0"

from .bitcore import (
    BitMatrix,
    RescaleTensor,
    binary_gemm,
    hamming_distance,
    pack,
    pairwise_hamming,
    sign_quantize,
    unpack,
    xnor_dot,
)
from .graph import GraphTopology, knn_hamming, knn_l2, knn_score_matmul

__all__ = [
    "BitMatrix",
    "RescaleTensor",
    "GraphTopology",
    "binary_gemm",
    "hamming_distance",
    "knn_hamming",
    "knn_l2",
    "knn_score_matmul",
    "pack",
    "pairwise_hamming",
    "sign_quantize",
    "unpack",
    "xnor_dot",
]
