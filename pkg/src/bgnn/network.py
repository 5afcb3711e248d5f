"""Model specifications, initialization, eval-mode forward, conversion.

A ModelSpec fully determines the network: operator kind and width per conv,
the quantizers in force (which is how the distillation stages differ), the
embedding/classifier head layout, and the input stem. Builders produce the
point-cloud classifier in two sizes: the full 4-conv variant and a 2-conv
"mini" one for fast desk experiments.

The eval forward pass here is the deterministic deployment path: float64
numpy, batch norm in inference mode, packed popcount kernels whenever the
weights arrive packed. The trainer rebuilds the same graph on the autodiff
tape; dedicated tests pin the two against each other.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .bitcore import BitMatrix, RescaleTensor, pack, sign_quantize, unpack
from .graph import batched_knn
from .ops import (
    BatchNormParams,
    HeadParams,
    LayerParams,
    PackedPair,
    batch_norm,
    binedgeconv,
    binsage,
    dense_block,
    edgeconv,
    global_pool_classify,
    graphsage,
    xoredgeconv,
)

CONV_KINDS = (
    "edgeconv",
    "binedgeconv",
    "xoredgeconv_bf1",
    "xoredgeconv_bf2",
    "graphsage",
    "binsage",
)
QUANTIZERS = ("none", "tanh", "sign")
VARIANTS = ("float", "rf", "bf1", "bf2")


@dataclass
class ConvSpec:
    kind: str
    out_channels: int

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind: {self.kind!r}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")


@dataclass
class HeadSpec:
    hidden: tuple[int, ...]
    dropout: float = 0.5
    binary: bool = False
    balance: str = "none"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class ModelSpec:
    """Complete architecture description; serialized into every model file."""

    arch: str
    variant: str
    in_dim: int
    k: int
    points: int
    convs: list[ConvSpec]
    embed_dim: int
    head: HeadSpec | None
    classes: int
    input_quantize: bool = False
    quantizer: str = "none"
    weight_quantizer: str = "none"

    def __post_init__(self):
        if self.arch not in ("dgcnn", "sage"):
            raise ValueError(f"unknown arch: {self.arch!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant!r}")
        if self.quantizer not in QUANTIZERS or self.weight_quantizer not in QUANTIZERS:
            raise ValueError("unknown quantizer")
        if not self.convs:
            raise ValueError("at least one conv layer required")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.points <= self.k:
            raise ValueError(f"need points > k, got points={self.points} k={self.k}")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        for i, c in enumerate(self.convs):
            if c.kind.startswith("xoredgeconv"):
                if i == 0 and not self.input_quantize:
                    raise ValueError(
                        "a fully binary conv needs quantized input: enable the "
                        "input stem or place it after a binary producer"
                    )
                if self.quantizer == "none":
                    raise ValueError("fully binary convs need an activation quantizer")
        if self.arch == "dgcnn" and (self.embed_dim < 1 or self.head is None):
            raise ValueError("dgcnn models need an embedding width and a head")

    @property
    def conv_widths(self) -> list[int]:
        return [c.out_channels for c in self.convs]

    def weight_mode(self) -> str:
        return {"sign": "sign", "tanh": "tanh", "none": "real"}[self.weight_quantizer]

    def input_mode(self) -> str:
        return {"sign": "sign", "tanh": "tanh", "none": "none"}[self.quantizer]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        d["convs"] = [ConvSpec(**c) for c in d["convs"]]
        if d.get("head") is not None:
            h = d["head"]
            h["hidden"] = tuple(h["hidden"])
            d["head"] = HeadSpec(**h)
        return cls(**d)


def make_spec(
    variant: str = "float",
    size: str = "mini",
    stage: int | None = None,
    classes: int = 3,
    k: int | None = None,
    points: int | None = None,
    in_dim: int = 3,
    arch: str = "dgcnn",
) -> ModelSpec:
    """Build the point-cloud classifier spec for a variant and stage.

    variant: "float" baseline, "rf" (binary weights, real features),
    "bf1"/"bf2" (fully binary, normalization after / before aggregation).
    stage maps onto quantizers: 1 = tanh everywhere (the smooth teacher),
    2 = hard activations with real weights, 3 / None = fully quantized.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant!r}")
    if size == "full":
        widths, embed, hidden = [64, 64, 128, 256], 1024, (512, 256)
        k = 20 if k is None else k
        points = 1024 if points is None else points
    elif size == "mini":
        widths, embed, hidden = [32, 64], 128, (64,)
        k = 12 if k is None else k
        points = 128 if points is None else points
    else:
        raise ValueError(f"unknown size: {size!r}")

    if variant == "float":
        quantizer, weight_quantizer = "none", "none"
    elif stage == 1:
        quantizer, weight_quantizer = "tanh", "tanh"
    elif stage == 2:
        quantizer, weight_quantizer = "sign", "none"
    elif stage in (3, None):
        quantizer, weight_quantizer = "sign", "sign"
    else:
        raise ValueError(f"unknown stage: {stage!r}")

    if arch == "sage":
        kind = "graphsage" if variant == "float" else "binsage"
    elif variant == "float":
        kind = "edgeconv"
    elif variant == "rf":
        kind = "binedgeconv"
    else:
        kind = f"xoredgeconv_{variant}"

    binary = variant != "float"
    return ModelSpec(
        arch=arch,
        variant=variant,
        in_dim=in_dim,
        k=k,
        points=points,
        convs=[ConvSpec(kind, w) for w in widths],
        embed_dim=embed if arch == "dgcnn" else 0,
        head=HeadSpec(hidden=hidden, dropout=0.5, binary=binary)
        if arch == "dgcnn"
        else HeadSpec(hidden=(), dropout=0.0, binary=binary),
        classes=classes,
        input_quantize=variant in ("bf1", "bf2"),
        quantizer=quantizer,
        weight_quantizer=weight_quantizer,
    )


@dataclass
class Model:
    """A spec plus its parameters.

    conv_params align with spec.convs; embed is the shared per-node embedding
    layer (dgcnn only); head carries the classifier blocks. stem_bn is the
    input-quantize normalization for fully binary variants.
    """

    spec: ModelSpec
    conv_params: list[LayerParams]
    embed: LayerParams | None
    head: HeadParams
    stem_bn: BatchNormParams | None = None

    def all_layer_params(self) -> list[tuple[str, LayerParams]]:
        named = [(f"conv{i}", p) for i, p in enumerate(self.conv_params)]
        if self.embed is not None:
            named.append(("embed", self.embed))
        named.extend((f"head{i}", p) for i, p in enumerate(self.head.blocks))
        return named


def _conv_layer_params(spec: ModelSpec, cspec: ConvSpec, in_dim: int, rng) -> LayerParams:
    out = cspec.out_channels
    fan_in = 2 * in_dim
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(out, fan_in))
    wm, im = spec.weight_mode(), spec.input_mode()
    if cspec.kind == "edgeconv":
        return LayerParams(weights=w, bn=BatchNormParams.init(out), activation="relu")
    if cspec.kind == "graphsage":
        return LayerParams(weights=w, activation="relu")
    if cspec.kind == "binedgeconv":
        gamma = RescaleTensor(
            "rank1", np.full(out, bound), np.ones(spec.points), np.ones(spec.k)
        )
        return LayerParams(
            weights=w, gamma=gamma, bn=BatchNormParams.init(fan_in),
            prelu=np.array([0.25]), weight_mode=wm, input_mode=im, activation="prelu",
        )
    if cspec.kind == "binsage":
        return LayerParams(
            weights=w, gamma=RescaleTensor("channel", np.full(out, bound)),
            bn=BatchNormParams.init(fan_in), prelu=np.array([0.25]),
            weight_mode=wm, input_mode=im, activation="prelu",
        )
    placement = "post_agg" if cspec.kind.endswith("bf1") else "pre_agg"
    return LayerParams(
        weights=w, gamma=RescaleTensor("channel", np.full(out, bound)),
        bn=BatchNormParams.init(out), prelu=np.array([0.25]),
        weight_mode=wm, input_mode=im, activation="prelu", bn_placement=placement,
    )


def _dense_layer_params(
    spec: ModelSpec, in_dim: int, out: int, final: bool, rng
) -> LayerParams:
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out, in_dim))
    binary = spec.head.binary if spec.head else False
    if not binary:
        if final:
            return LayerParams(weights=w, activation="none")
        return LayerParams(weights=w, bn=BatchNormParams.init(out), activation="relu")
    im = spec.input_mode()
    if final:
        # final logits keep real weights; only the input is quantized
        return LayerParams(
            weights=w, bn=BatchNormParams.init(in_dim),
            weight_mode="real", input_mode=im, activation="none",
        )
    return LayerParams(
        weights=w, gamma=RescaleTensor("channel", np.full(out, bound)),
        bn=BatchNormParams.init(in_dim), prelu=np.array([0.25]),
        weight_mode=spec.weight_mode(), input_mode=im, activation="prelu",
    )


def init_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Deterministic parameter initialization from a seed."""
    rng = np.random.default_rng(seed)
    conv_params = []
    width = spec.in_dim
    for cspec in spec.convs:
        conv_params.append(_conv_layer_params(spec, cspec, width, rng))
        width = cspec.out_channels

    embed = None
    if spec.arch == "dgcnn":
        concat_width = sum(spec.conv_widths)
        embed = _dense_layer_params(spec, concat_width, spec.embed_dim, False, rng)
        pooled = 2 * spec.embed_dim
    else:
        pooled = 2 * width

    blocks = []
    prev = pooled
    for h in spec.head.hidden:
        blocks.append(_dense_layer_params(spec, prev, h, False, rng))
        prev = h
    blocks.append(_dense_layer_params(spec, prev, spec.classes, True, rng))
    head = HeadParams(blocks=blocks, dropout=spec.head.dropout, balance=spec.head.balance)

    stem = BatchNormParams.init(spec.in_dim) if spec.input_quantize else None
    return Model(spec=spec, conv_params=conv_params, embed=embed, head=head, stem_bn=stem)


_CONV_FN = {
    "edgeconv": edgeconv,
    "binedgeconv": binedgeconv,
    "xoredgeconv_bf1": xoredgeconv,
    "xoredgeconv_bf2": xoredgeconv,
    "graphsage": graphsage,
    "binsage": binsage,
}


def feature_metric(feats) -> str:
    """Pick the kNN metric the features support: packed rows use Hamming,
    exact {-1,+1} rows the matmul score (same ordering), anything else l2."""
    if isinstance(feats, BitMatrix):
        return "hamming"
    if np.all(np.abs(feats) == 1.0):
        return "score"
    return "l2"


def forward_eval(
    model: Model,
    coords: np.ndarray,
    n_graphs: int = 1,
    collect: bool = False,
):
    """Inference-mode forward pass on stacked clouds.

    Returns (n_graphs, classes) logits; with collect=True also a dict holding
    the per-layer topologies and the features each dynamic kNN consumed
    (the similarity-transfer points for distillation losses).
    """
    spec = model.spec
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != spec.in_dim:
        raise ValueError(f"expected (points, {spec.in_dim}) coordinates")
    if coords.shape[0] != n_graphs * spec.points:
        raise ValueError(
            f"expected {n_graphs} x {spec.points} stacked points, got {coords.shape[0]}"
        )

    packed_mode = any(
        isinstance(p.weights, (BitMatrix, PackedPair)) for p in model.conv_params
    )
    topo = batched_knn(coords, spec.k, n_graphs, "l2")

    if spec.input_quantize:
        stem = batch_norm(coords, model.stem_bn, training=False)
        feats = np.tanh(stem) if spec.quantizer == "tanh" else sign_quantize(stem)
        if packed_mode and spec.quantizer == "sign":
            feats = pack(feats)
    else:
        feats = coords

    outputs = []
    topos = [topo]
    transfer = []
    for idx, (cspec, params) in enumerate(zip(spec.convs, model.conv_params)):
        if idx > 0:
            transfer.append(feats)
            topo = batched_knn(feats, spec.k, n_graphs, feature_metric(feats))
            topos.append(topo)
        feats = _CONV_FN[cspec.kind](feats, topo, params, False)
        outputs.append(feats)

    if spec.arch == "dgcnn":
        dense_outs = [unpack(o) if isinstance(o, BitMatrix) else o for o in outputs]
        cat = np.concatenate(dense_outs, axis=1)
        emb = dense_block(cat, model.embed, training=False)
    else:
        emb = unpack(feats) if isinstance(feats, BitMatrix) else feats

    logits = global_pool_classify(emb, model.head, n_graphs=n_graphs, training=False)
    if collect:
        dense_transfer = [
            unpack(t) if isinstance(t, BitMatrix) else t for t in transfer
        ]
        return logits, {"topologies": topos, "transfer": dense_transfer}
    return logits


def predict(model: Model, coords: np.ndarray, n_graphs: int = 1) -> np.ndarray:
    return np.argmax(forward_eval(model, coords, n_graphs), axis=1)


def evaluate_accuracy(model: Model, clouds: np.ndarray, labels: np.ndarray,
                      batch_graphs: int = 16) -> float:
    """Mean accuracy over (N, points, in_dim) clouds, evaluated in batches."""
    n = clouds.shape[0]
    correct = 0
    for lo in range(0, n, batch_graphs):
        chunk = clouds[lo : lo + batch_graphs]
        stacked = chunk.reshape(-1, chunk.shape[-1]) if chunk.ndim == 3 else chunk
        preds = predict(model, stacked, n_graphs=chunk.shape[0])
        correct += int((preds == labels[lo : lo + batch_graphs]).sum())
    return correct / n


def convert_to_deploy(model: Model) -> Model:
    """Pack every sign-mode weight matrix to bits; real layers pass through.

    The converted model evaluates bitwise-identically to the source
    checkpoint because sign(latent) and the packed bits are the same thing
    and all remaining parameters are copied untouched.
    """
    spec = model.spec
    if spec.quantizer == "tanh" or spec.weight_quantizer == "tanh":
        raise ValueError("stage-1 (tanh) models have no binary deployment form")
    new_convs = []
    for cspec, p in zip(spec.convs, model.conv_params):
        if p.weight_mode == "sign" and isinstance(p.weights, np.ndarray):
            ws = sign_quantize(np.asarray(p.weights, dtype=np.float64))
            if cspec.kind.startswith("xoredgeconv"):
                d = ws.shape[1] // 2
                packed = PackedPair(pack(ws[:, :d]), pack(ws[:, d:]))
            else:
                packed = pack(ws)
            q = p.copy()
            q.weights = packed
            new_convs.append(q)
        else:
            new_convs.append(p.copy())

    def pack_dense(p: LayerParams) -> LayerParams:
        q = p.copy()
        if p.weight_mode == "sign" and isinstance(p.weights, np.ndarray):
            q.weights = pack(sign_quantize(np.asarray(p.weights, dtype=np.float64)))
        return q

    embed = pack_dense(model.embed) if model.embed is not None else None
    head = HeadParams(
        blocks=[pack_dense(b) for b in model.head.blocks],
        dropout=model.head.dropout,
        balance=model.head.balance,
    )
    return Model(
        spec=spec, conv_params=new_convs, embed=embed, head=head,
        stem_bn=model.stem_bn.copy() if model.stem_bn else None,
    )


def binarization_report(model: Model) -> dict:
    """Weight census: which GEMM layers are binary, and the packed fraction."""
    layers = []
    bin_count = real_count = 0
    for name, p in model.all_layer_params():
        if p.weights is None:
            continue
        if isinstance(p.weights, PackedPair):
            n_params = 2 * p.weights.self_bits.rows * p.weights.self_bits.dim
            is_binary = True
        elif isinstance(p.weights, BitMatrix):
            n_params = p.weights.rows * p.weights.dim
            is_binary = True
        else:
            n_params = int(np.asarray(p.weights).size)
            is_binary = p.weight_mode == "sign"
        layers.append({"layer": name, "weights": n_params, "binary": is_binary})
        if is_binary:
            bin_count += n_params
        else:
            real_count += n_params
    total = bin_count + real_count
    return {
        "layers": layers,
        "binary_weights": bin_count,
        "real_weights": real_count,
        "binary_fraction": bin_count / total if total else 0.0,
    }


def count_parameters(model: Model) -> dict:
    """Full parameter census split into binary weights and real scalars."""
    report = binarization_report(model)
    aux = 0
    for _, p in model.all_layer_params():
        if p.bn is not None:
            aux += 4 * p.bn.channels
        if p.gamma is not None:
            aux += p.gamma.alpha.size
            if p.gamma.kind == "rank1":
                aux += p.gamma.beta.size + p.gamma.gamma.size
        if p.prelu is not None:
            aux += p.prelu.size
    if model.stem_bn is not None:
        aux += 4 * model.stem_bn.channels
    return {
        "binary_weights": report["binary_weights"],
        "real_weights": report["real_weights"],
        "real_aux": aux,
        "total": report["binary_weights"] + report["real_weights"] + aux,
    }
