"""Graph convolution operators and their shared building blocks.

Everything here is the deterministic eval-path numerics: plain numpy on
float64, with binary layers dispatching to the packed popcount kernels when
their weights arrive pre-packed. The training path in `training.py` rebuilds
the same compositions on the autodiff tape; tests pin the two paths to each
other exactly.

Layer behaviour is controlled by two mode fields on LayerParams rather than
separate operator flavours per distillation stage:

* weight_mode - how latent weights enter the GEMM: "real" as-is, "sign"
  quantized (or already packed), "tanh" the smooth stage-1 relaxation;
* input_mode - the quantizer applied after the pre-GEMM batch norm: "none"
  (real features, no BN-then-quantize step), "sign", or "tanh".

Operator zoo:

* edgeconv        - real DGCNN edge convolution, max aggregation
* binedgeconv     - binarized edge features and weights, real output
* xoredgeconv     - fully binary in/out; the edge tensor [x_i || -x_j * x_i]
                    is XOR on packed rows; bn_placement picks the variant
                    (normalize after or before the max aggregation)
* graphsage       - real mean-aggregation conv with l2-normalized output
* binsage         - its binarized counterpart, real output after normalize
* dense_block     - shared fully-connected block (embedding and classifier)
* global_pool_classify - max||mean readout plus the classifier MLP
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .bitcore import (
    BitMatrix,
    RescaleTensor,
    binary_gemm,
    pack,
    sign_quantize,
    unpack,
    xor_rows,
)
from .graph import GraphTopology

WEIGHT_MODES = ("real", "sign", "tanh")
INPUT_MODES = ("none", "sign", "tanh")


@dataclass
class BatchNormParams:
    """Affine batch norm state for a fixed number of channels."""

    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int) -> "BatchNormParams":
        return cls(
            mean=np.zeros(channels),
            var=np.ones(channels),
            scale=np.ones(channels),
            shift=np.zeros(channels),
        )

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(
            self.mean.copy(), self.var.copy(), self.scale.copy(), self.shift.copy(),
            self.momentum, self.eps,
        )


@dataclass(frozen=True)
class PackedPair:
    """Packed conv weights split at the self/edge feature boundary.

    The logical weight is (out, 2d); storing the halves separately avoids
    bit-slicing packed rows at an arbitrary offset d.
    """

    self_bits: BitMatrix
    edge_bits: BitMatrix

    def __post_init__(self):
        if self.self_bits.rows != self.edge_bits.rows:
            raise ValueError("packed halves disagree on output channels")
        if self.self_bits.dim != self.edge_bits.dim:
            raise ValueError("packed halves disagree on input width")


@dataclass
class LayerParams:
    """Parameters plus quantizer modes for one layer.

    `weights` is (out, in) latent reals during training, or packed bits
    (BitMatrix / PackedPair) after conversion. `bn_placement` only matters
    for the fully binary edge conv ("post_agg" normalizes the aggregated
    node feature, "pre_agg" normalizes edge messages before aggregation).
    """

    weights: np.ndarray | BitMatrix | PackedPair | None
    gamma: RescaleTensor | None = None
    bn: BatchNormParams | None = None
    prelu: np.ndarray | None = None
    weight_mode: str = "real"
    input_mode: str = "none"
    activation: str = "relu"
    bn_placement: str = "post_agg"

    def __post_init__(self):
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode: {self.weight_mode!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode: {self.input_mode!r}")

    def copy(self) -> "LayerParams":
        w = self.weights.copy() if isinstance(self.weights, np.ndarray) else self.weights
        return replace(
            self,
            weights=w,
            bn=self.bn.copy() if self.bn else None,
            prelu=self.prelu.copy() if self.prelu is not None else None,
        )


@dataclass
class HeadParams:
    """Classifier head: hidden blocks then a final logit layer.

    `balance` optionally centres the pooled global feature per channel
    before the MLP (mean or lower-median subtraction).
    """

    blocks: list[LayerParams] = field(default_factory=list)
    dropout: float = 0.0
    balance: str = "none"


def batch_norm(x: np.ndarray, p: BatchNormParams, training: bool = False) -> np.ndarray:
    """Normalize channels; training mode uses batch stats and updates the
    running averages in place (biased variance throughout)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.channels:
        raise ValueError(f"expected (batch, {p.channels}) input, got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("batch norm over an empty batch")
    if training:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        p.mean[:] = p.momentum * p.mean + (1.0 - p.momentum) * mu
        p.var[:] = p.momentum * p.var + (1.0 - p.momentum) * var
    else:
        mu, var = p.mean, p.var
    return (x - mu) / np.sqrt(var + p.eps) * p.scale + p.shift


def balance(x: np.ndarray, mode: str) -> np.ndarray:
    """Centre each channel by its mean or lower median over the batch axis."""
    if mode == "none":
        return x
    x = np.asarray(x, dtype=np.float64)
    if mode == "mean":
        return x - x.mean(axis=0)
    if mode == "median":
        lower = np.sort(x, axis=0)[(x.shape[0] - 1) // 2]
        return x - lower
    raise ValueError(f"unknown balance mode: {mode!r}")


def prelu(x: np.ndarray, slope) -> np.ndarray:
    return np.where(x < 0, np.asarray(slope, dtype=np.float64) * x, x)


def _activate(x: np.ndarray, p: LayerParams) -> np.ndarray:
    if p.activation == "relu":
        return np.maximum(x, 0.0)
    if p.activation == "prelu":
        if p.prelu is None:
            raise ValueError("prelu activation without a slope parameter")
        return prelu(x, p.prelu)
    if p.activation == "none":
        return x
    raise ValueError(f"unknown activation: {p.activation!r}")


def _quantize(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "sign":
        return sign_quantize(x)
    if mode == "tanh":
        return np.tanh(x)
    if mode == "none":
        return x
    raise ValueError(f"unknown quantize mode: {mode!r}")


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Unit-norm rows; all-zero rows stay zero."""
    norms = np.sqrt((x**2).sum(axis=1, keepdims=True))
    return np.divide(x, norms, out=np.zeros_like(x), where=norms != 0)


def edge_features(x: np.ndarray, topo: GraphTopology) -> np.ndarray:
    """Real edge tensor [x_i || x_j - x_i], row-major over (node, slot)."""
    x = np.asarray(x, dtype=np.float64)
    src, dst = topo.edge_index()
    return np.concatenate([x[src], x[dst] - x[src]], axis=1)


def binary_edge_features(x: np.ndarray, topo: GraphTopology) -> np.ndarray:
    """Binary edge tensor [x_i || -x_j * x_i] for {-1,+1} features.

    The second half equals XOR of the packed rows; this dense version exists
    for the float-emulation path and the oracle tests.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.abs(x) == 1.0):
        raise ValueError("binary edge features expect {-1,+1} input")
    src, dst = topo.edge_index()
    return np.concatenate([x[src], -(x[dst] * x[src])], axis=1)


def effective_weights(p: LayerParams) -> np.ndarray:
    """Latent weights as the GEMM will see them under the layer's mode."""
    w = np.asarray(p.weights, dtype=np.float64)
    if p.weight_mode == "sign":
        return sign_quantize(w)
    if p.weight_mode == "tanh":
        return np.tanh(w)
    return w


def _gemm(x: np.ndarray, p: LayerParams, n_rows: int) -> np.ndarray:
    """x @ W_effective.T with the optional learned rescale.

    Packed weights demand exact {-1,+1} input and run on popcount kernels;
    latent weights run in float (exact for sign products, which are small
    integers). Both give identical numbers for sign mode.
    """
    if isinstance(p.weights, BitMatrix):
        out = binary_gemm(pack(x), p.weights)
    else:
        out = x @ effective_weights(p).T
    if p.gamma is not None:
        out = out * p.gamma.factors(n_rows)
    return out


def edgeconv(
    x: np.ndarray, topo: GraphTopology, p: LayerParams, training: bool = False
) -> np.ndarray:
    """Real edge convolution: max over activation(Theta [x_i || x_j - x_i])."""
    n, k = topo.n, topo.k
    ef = edge_features(x, topo)
    h = ef @ np.asarray(p.weights, dtype=np.float64).T
    if p.bn is not None:
        h = batch_norm(h, p.bn, training)
    h = _activate(h, p)
    return h.reshape(n, k, -1).max(axis=1)


def binedgeconv(
    x: np.ndarray, topo: GraphTopology, p: LayerParams, training: bool = False
) -> np.ndarray:
    """Binarized edge conv on real inputs; output stays real.

    Edge features are batch-normalized then quantized (input_mode),
    multiplied by the mode-quantized weights, rescaled by Gamma, passed
    through the activation, and max-aggregated.
    """
    n, k = topo.n, topo.k
    if p.bn is None or p.input_mode == "none":
        raise ValueError("binedgeconv needs batch norm and an input quantizer")
    ef = edge_features(x, topo)
    hq = _quantize(batch_norm(ef, p.bn, training), p.input_mode)
    msg = _gemm(hq, p, n * k)
    msg = _activate(msg, p)
    return msg.reshape(n, k, -1).max(axis=1)


def xoredgeconv(
    x: BitMatrix | np.ndarray,
    topo: GraphTopology,
    p: LayerParams,
    training: bool = False,
):
    """Fully binary edge conv: quantized input, quantized output.

    Packed input runs entirely on XOR/popcount; dense input runs the float
    emulation used during training (exact for sign mode, the tanh relaxation
    for stage-1 models). Output is re-quantized with the same input_mode, so
    binary stays binary. The two paths agree bit for bit in sign mode.
    """
    n, k = topo.n, topo.k
    if p.bn is None:
        raise ValueError("xoredgeconv requires batch norm params")
    src, dst = topo.edge_index()
    packed = isinstance(x, BitMatrix)
    if packed:
        if not isinstance(p.weights, PackedPair):
            raise ValueError("packed input needs packed weights (PackedPair)")
        self_part = binary_gemm(x, p.weights.self_bits)  # (n, out)
        edge_bits = xor_rows(x.take(src), x.take(dst))
        edge_part = binary_gemm(edge_bits, p.weights.edge_bits)  # (n*k, out)
    else:
        x = np.asarray(x, dtype=np.float64)
        if p.input_mode == "sign" and not np.all(np.abs(x) == 1.0):
            raise ValueError("sign-mode xoredgeconv expects {-1,+1} features")
        if isinstance(p.weights, PackedPair):
            w = np.concatenate(
                [unpack(p.weights.self_bits), unpack(p.weights.edge_bits)], axis=1
            )
        else:
            w = effective_weights(p)
        d = x.shape[1]
        self_part = x @ w[:, :d].T
        edge_part = -(x[dst] * x[src]) @ w[:, d:].T
    msg = self_part[src] + edge_part
    if p.gamma is not None:
        msg = msg * p.gamma.factors(n * k)
    msg = _activate(msg, p)
    if p.bn_placement == "pre_agg":
        msg = batch_norm(msg, p.bn, training)
        agg = msg.reshape(n, k, -1).max(axis=1)
    elif p.bn_placement == "post_agg":
        agg = msg.reshape(n, k, -1).max(axis=1)
        agg = batch_norm(agg, p.bn, training)
    else:
        raise ValueError(f"unknown bn placement: {p.bn_placement!r}")
    out = _quantize(agg, p.input_mode)
    return pack(out) if packed else out


def graphsage(
    x: np.ndarray, topo: GraphTopology, p: LayerParams, training: bool = False
) -> np.ndarray:
    """Mean-aggregation conv with l2-normalized output."""
    x = np.asarray(x, dtype=np.float64)
    agg = x[topo.neighbours].mean(axis=1)
    h = np.concatenate([x, agg], axis=1) @ np.asarray(p.weights, dtype=np.float64).T
    if p.bn is not None:
        h = batch_norm(h, p.bn, training)
    h = _activate(h, p)
    return l2_normalize_rows(h)


def binsage(
    x: np.ndarray, topo: GraphTopology, p: LayerParams, training: bool = False
) -> np.ndarray:
    """Binarized SAGE: quantize(BN([x || mean_j x_j])) against mode weights."""
    x = np.asarray(x, dtype=np.float64)
    if p.bn is None or p.input_mode == "none":
        raise ValueError("binsage needs batch norm and an input quantizer")
    agg = x[topo.neighbours].mean(axis=1)
    cat = np.concatenate([x, agg], axis=1)
    hq = _quantize(batch_norm(cat, p.bn, training), p.input_mode)
    h = _gemm(hq, p, x.shape[0])
    h = _activate(h, p)
    return l2_normalize_rows(h)


def dense_block(x: np.ndarray, p: LayerParams, training: bool = False) -> np.ndarray:
    """Fully-connected block, shared by the embedding layer and the head.

    Real flavour (input_mode "none"): GEMM, then BN, then activation.
    Binarized flavour: quantize(BN(x)) first, then the mode-governed GEMM
    with rescale, then activation. The final logit layer is the binarized
    flavour with real weights and no activation.
    """
    x = np.asarray(x, dtype=np.float64)
    if p.input_mode != "none":
        if p.bn is None:
            raise ValueError("quantized input needs batch norm before the quantizer")
        hq = _quantize(batch_norm(x, p.bn, training), p.input_mode)
        return _activate(_gemm(hq, p, x.shape[0]), p)
    h = x @ np.asarray(p.weights, dtype=np.float64).T
    if p.bn is not None:
        h = batch_norm(h, p.bn, training)
    return _activate(h, p)


def global_pool(emb: np.ndarray, n_graphs: int = 1) -> np.ndarray:
    """Per-graph readout: [max-pool || mean-pool], (n_graphs, 2 * channels).

    Node rows must be grouped by graph with equal node counts (the stacked
    batching the trainer uses).
    """
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] % n_graphs:
        raise ValueError(
            f"{emb.shape[0]} node rows do not split into {n_graphs} equal graphs"
        )
    per = emb.reshape(n_graphs, -1, emb.shape[1])
    return np.concatenate([per.max(axis=1), per.mean(axis=1)], axis=1)


def global_pool_classify(
    emb: np.ndarray,
    head: HeadParams,
    n_graphs: int = 1,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Readout plus classifier MLP; returns (n_graphs, classes) logits.

    Dropout after each hidden block when training (requires an rng); the
    final block produces raw logits.
    """
    pooled = balance(global_pool(emb, n_graphs), head.balance)
    h = pooled
    for block in head.blocks[:-1]:
        h = dense_block(h, block, training)
        if training and head.dropout > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            mask = (rng.random(h.shape) >= head.dropout) / (1.0 - head.dropout)
            h = h * mask
    return dense_block(h, head.blocks[-1], training)
