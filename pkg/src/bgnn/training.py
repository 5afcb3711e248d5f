"""Quantization-aware training and the cascaded distillation schedule.

The trainer rebuilds the eval-path operator compositions on the autodiff
tape, with hard quantizers swapped for their straight-through forms (and
optionally for finite-difference-checkable smooth surrogates). Parameters
stay float64 in memory; serialization rounds to float32.

Distillation runs in three stages that relax the network progressively:
tanh-everywhere, then hard activations with real weights, then fully
binary. Each stage learns from the previous one through a logit-matching
term and a local-similarity-preserving (LSP) term that aligns neighbourhood
softmax distributions over the union of teacher and student kNN edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphTopology, batched_knn, neighbour_union
from .modelio import DistillConfig, PointCloudDataset, TrainConfig
from .network import (
    Model,
    evaluate_accuracy,
    feature_metric,
    forward_eval,
    init_model,
    make_spec,
)
from .ops import LayerParams


# -- allocator tuning -------------------------------------------------------


_allocator_tuned = False


def tune_allocator() -> bool:
    """Keep freed large blocks in the malloc arena instead of unmapping them.

    The tape allocates and frees tens of megabytes of float64 temporaries
    per batch. Default glibc behaviour hands blocks that size straight back
    to the kernel, so every reallocation page-faults the whole buffer in
    again; raising the mmap threshold keeps them in the arena and raising
    the trim threshold to 1 GiB stops the arena being shrunk between
    batches. Worth several-fold on batch time here. Returns False (and
    does nothing) where mallopt is unavailable.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 1 << 26)
        libc.mallopt(m_trim_threshold, 1 << 30)
    except OSError:
        return False
    _allocator_tuned = True
    return True


# -- parameter registry -----------------------------------------------------


def named_parameters(model: Model) -> dict[str, np.ndarray]:
    """Trainable leaves by name, referencing the model's own arrays.

    Running batch-norm statistics are state, not parameters, and packed
    weight matrices are frozen; neither appears here.
    """
    params: dict[str, np.ndarray] = {}
    if model.stem_bn is not None:
        params["stem.bn.scale"] = model.stem_bn.scale
        params["stem.bn.shift"] = model.stem_bn.shift
    for name, p in model.all_layer_params():
        if isinstance(p.weights, np.ndarray):
            params[f"{name}.w"] = p.weights
        if p.gamma is not None:
            params[f"{name}.g.alpha"] = p.gamma.alpha
            if p.gamma.kind == "rank1":
                params[f"{name}.g.beta"] = p.gamma.beta
                params[f"{name}.g.gamma"] = p.gamma.gamma
        if p.bn is not None:
            params[f"{name}.bn.scale"] = p.bn.scale
            params[f"{name}.bn.shift"] = p.bn.shift
        if p.prelu is not None:
            params[f"{name}.prelu"] = p.prelu
    return params


def build_param_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def copy_parameters(src: Model, dst: Model) -> None:
    """Copy all trainable arrays and batch-norm state between same-shape models."""
    src_p, dst_p = named_parameters(src), named_parameters(dst)
    if src_p.keys() != dst_p.keys():
        raise ValueError("models do not share a parameter layout")
    for k in src_p:
        np.copyto(dst_p[k], src_p[k])
    pairs = list(zip(src.all_layer_params(), dst.all_layer_params()))
    for (_, a), (_, b) in pairs:
        if a.bn is not None:
            np.copyto(b.bn.mean, a.bn.mean)
            np.copyto(b.bn.var, a.bn.var)
    if src.stem_bn is not None and dst.stem_bn is not None:
        np.copyto(dst.stem_bn.mean, src.stem_bn.mean)
        np.copyto(dst.stem_bn.var, src.stem_bn.var)


# -- tape building blocks ---------------------------------------------------


def _quantize_t(x: Tensor, mode: str, surrogate: bool) -> Tensor:
    if mode == "sign":
        return ad.hardtanh(x) if surrogate else ad.sign_ste(x)
    if mode == "tanh":
        return ad.tanh(x)
    return x


def _batch_norm_t(
    x: Tensor, bn, pt: dict, prefix: str, training: bool, update_stats: bool
) -> Tensor:
    scale, shift = pt[f"{prefix}.scale"], pt[f"{prefix}.shift"]
    if training:
        out, mu, var = ad.batch_norm_train(x, scale, shift, bn.eps)
        if update_stats:
            bn.mean[:] = bn.momentum * bn.mean + (1.0 - bn.momentum) * mu
            bn.var[:] = bn.momentum * bn.var + (1.0 - bn.momentum) * var
        return out
    xhat = (x - bn.mean) * (1.0 / np.sqrt(bn.var + bn.eps))
    return xhat * scale + shift


def _gamma_factors_t(p: LayerParams, pt: dict, name: str, rows: int):
    g = p.gamma
    if g is None:
        return None
    alpha = pt[f"{name}.g.alpha"]
    if g.kind == "channel":
        return alpha
    beta, gamma = pt[f"{name}.g.beta"], pt[f"{name}.g.gamma"]
    period = beta.data.shape[0] * gamma.data.shape[0]
    if rows % period:
        raise ValueError(f"rank1 rescale covers multiples of {period} rows, got {rows}")
    row_scale = ad.matmul(beta.reshape(-1, 1), gamma.reshape(1, -1)).reshape(-1, 1)
    if rows != period:
        row_scale = ad.concat([row_scale] * (rows // period), axis=0)
    return row_scale * alpha


def _gemm_t(x: Tensor, p: LayerParams, pt: dict, name: str, rows: int,
            surrogate: bool) -> Tensor:
    if not isinstance(p.weights, np.ndarray):
        raise ValueError(
            f"layer {name} has packed weights; deployment models are frozen"
        )
    w = pt[f"{name}.w"]
    if p.weight_mode == "sign":
        w = ad.hardtanh(w) if surrogate else ad.sign_ste(w)
    elif p.weight_mode == "tanh":
        w = ad.tanh(w)
    out = ad.matmul(x, ad.transpose(w))
    factors = _gamma_factors_t(p, pt, name, rows)
    if factors is not None:
        out = out * factors
    return out


def _activate_t(h: Tensor, p: LayerParams, pt: dict, name: str) -> Tensor:
    if p.activation == "relu":
        return ad.relu(h)
    if p.activation == "prelu":
        return ad.prelu(h, pt[f"{name}.prelu"])
    return h


class _Ctx:
    """Plumbing shared by the per-layer tape builders."""

    def __init__(self, pt, training, update_stats, surrogate):
        self.pt = pt
        self.training = training
        self.update_stats = update_stats
        self.surrogate = surrogate

    def bn(self, x, layer_bn, prefix):
        return _batch_norm_t(
            x, layer_bn, self.pt, prefix, self.training, self.update_stats
        )


def _edge_features_t(x: Tensor, topo) -> Tensor:
    """[x_i || x_j - x_i] over edge rows, fused into one tape node.

    Edge tensors dominate the trainer's memory traffic, so gather,
    difference, and concat happen in a single pass with a hand-written
    scatter/reduce backward.
    """
    _, dst = topo.edge_index()
    n, d = x.data.shape
    k = topo.k
    xi = np.repeat(x.data, k, axis=0)
    data = np.empty((n * k, 2 * d))
    data[:, :d] = xi
    np.subtract(x.data[dst], xi, out=data[:, d:])
    out = Tensor(data, parents=(x,))

    def backward(g):
        g_self, g_diff = g[:, :d], g[:, d:]
        gx = (g_self - g_diff).reshape(n, k, d).sum(axis=1)
        np.add.at(gx, dst, g_diff)
        x.accumulate_owned(gx)

    out._backward = backward
    return out


def _edge_product_t(x: Tensor, topo) -> Tensor:
    """-(x_j * x_i) over edge rows as one tape node (the XOR edge tensor)."""
    _, dst = topo.edge_index()
    n, d = x.data.shape
    k = topo.k
    xi = np.repeat(x.data, k, axis=0)
    xd = x.data[dst]
    data = xi * xd
    np.negative(data, out=data)
    out = Tensor(data, parents=(x,))

    def backward(g):
        gi = g * xd
        np.negative(gi, out=gi)
        gx = gi.reshape(n, k, d).sum(axis=1)
        gj = g * xi
        np.negative(gj, out=gj)
        np.add.at(gx, dst, gj)
        x.accumulate_owned(gx)

    out._backward = backward
    return out


def _edgeconv_t(x: Tensor, topo, p, name, ctx: _Ctx) -> Tensor:
    ef = _edge_features_t(x, topo)
    h = ad.matmul(ef, ad.transpose(ctx.pt[f"{name}.w"]))
    if p.bn is not None:
        h = ctx.bn(h, p.bn, f"{name}.bn")
    h = _activate_t(h, p, ctx.pt, name)
    return ad.tmax(h.reshape(topo.n, topo.k, -1), axis=1)


def _binedgeconv_t(x: Tensor, topo, p, name, ctx: _Ctx) -> Tensor:
    ef = _edge_features_t(x, topo)
    hq = _quantize_t(ctx.bn(ef, p.bn, f"{name}.bn"), p.input_mode, ctx.surrogate)
    msg = _gemm_t(hq, p, ctx.pt, name, topo.n * topo.k, ctx.surrogate)
    msg = _activate_t(msg, p, ctx.pt, name)
    return ad.tmax(msg.reshape(topo.n, topo.k, -1), axis=1)


def _xoredgeconv_t(x: Tensor, topo, p, name, ctx: _Ctx) -> Tensor:
    w = ctx.pt[f"{name}.w"]
    if p.weight_mode == "sign":
        w = ad.hardtanh(w) if ctx.surrogate else ad.sign_ste(w)
    elif p.weight_mode == "tanh":
        w = ad.tanh(w)
    d = x.shape[1]
    self_part = ad.matmul(x, ad.transpose(w[:, :d]))
    edge_part = ad.matmul(_edge_product_t(x, topo), ad.transpose(w[:, d:]))
    msg = ad.repeat_rows(self_part, topo.k) + edge_part
    factors = _gamma_factors_t(p, ctx.pt, name, topo.n * topo.k)
    if factors is not None:
        msg = msg * factors
    msg = _activate_t(msg, p, ctx.pt, name)
    if p.bn_placement == "pre_agg":
        msg = ctx.bn(msg, p.bn, f"{name}.bn")
        agg = ad.tmax(msg.reshape(topo.n, topo.k, -1), axis=1)
    else:
        agg = ad.tmax(msg.reshape(topo.n, topo.k, -1), axis=1)
        agg = ctx.bn(agg, p.bn, f"{name}.bn")
    return _quantize_t(agg, p.input_mode, ctx.surrogate)


def _graphsage_t(x: Tensor, topo, p, name, ctx: _Ctx) -> Tensor:
    n, k = topo.n, topo.k
    gathered = ad.gather_rows(x, topo.neighbours.ravel())
    agg = gathered.reshape(n, k, -1).mean(axis=1)
    cat = ad.concat([x, agg], axis=1)
    h = ad.matmul(cat, ad.transpose(ctx.pt[f"{name}.w"]))
    if p.bn is not None:
        h = ctx.bn(h, p.bn, f"{name}.bn")
    h = _activate_t(h, p, ctx.pt, name)
    return ad.l2_normalize_rows(h)


def _binsage_t(x: Tensor, topo, p, name, ctx: _Ctx) -> Tensor:
    n, k = topo.n, topo.k
    gathered = ad.gather_rows(x, topo.neighbours.ravel())
    agg = gathered.reshape(n, k, -1).mean(axis=1)
    cat = ad.concat([x, agg], axis=1)
    hq = _quantize_t(ctx.bn(cat, p.bn, f"{name}.bn"), p.input_mode, ctx.surrogate)
    h = _gemm_t(hq, p, ctx.pt, name, n, ctx.surrogate)
    h = _activate_t(h, p, ctx.pt, name)
    return ad.l2_normalize_rows(h)


def _dense_block_t(x: Tensor, p, name, ctx: _Ctx) -> Tensor:
    if p.input_mode != "none":
        hq = _quantize_t(ctx.bn(x, p.bn, f"{name}.bn"), p.input_mode, ctx.surrogate)
        h = _gemm_t(hq, p, ctx.pt, name, x.shape[0], ctx.surrogate)
        return _activate_t(h, p, ctx.pt, name)
    h = ad.matmul(x, ad.transpose(ctx.pt[f"{name}.w"]))
    if p.bn is not None:
        h = ctx.bn(h, p.bn, f"{name}.bn")
    return _activate_t(h, p, ctx.pt, name)


_CONV_T = {
    "edgeconv": _edgeconv_t,
    "binedgeconv": _binedgeconv_t,
    "xoredgeconv_bf1": _xoredgeconv_t,
    "xoredgeconv_bf2": _xoredgeconv_t,
    "graphsage": _graphsage_t,
    "binsage": _binsage_t,
}


def forward_train(
    model: Model,
    coords: np.ndarray,
    pt: dict[str, Tensor],
    n_graphs: int = 1,
    training: bool = True,
    update_stats: bool = True,
    surrogate: bool = False,
    dropout_rng: np.random.Generator | None = None,
    collect: bool = False,
    topologies: list | None = None,
):
    """Tape version of the eval forward pass.

    Graph construction runs on detached feature values (topology selection
    is not differentiated). With surrogate=True every hard sign becomes
    clip(x, -1, 1), keeping the forward continuous so finite differences
    can check the analytic gradients; passing `topologies` (one per conv)
    pins the graphs as well, removing the remaining discrete jumps.
    """
    spec = model.spec
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != spec.in_dim:
        raise ValueError(f"expected (points, {spec.in_dim}) coordinates")
    if coords.shape[0] != n_graphs * spec.points:
        raise ValueError(
            f"expected {n_graphs} x {spec.points} stacked points, got {coords.shape[0]}"
        )
    ctx = _Ctx(pt, training, update_stats, surrogate)
    if topologies is not None and len(topologies) != len(spec.convs):
        raise ValueError(f"expected {len(spec.convs)} pinned topologies")
    if topologies is not None:
        topo = topologies[0]
    else:
        topo = batched_knn(coords, spec.k, n_graphs, "l2")

    if spec.input_quantize:
        stem = ctx.bn(Tensor(coords), model.stem_bn, "stem.bn")
        feats = _quantize_t(stem, spec.input_mode(), surrogate)
    else:
        feats = Tensor(coords)

    outputs, topos, transfer = [], [topo], []
    for idx, (cspec, params) in enumerate(zip(spec.convs, model.conv_params)):
        if idx > 0:
            transfer.append(feats)
            if topologies is not None:
                topo = topologies[idx]
            else:
                topo = batched_knn(
                    feats.data, spec.k, n_graphs, feature_metric(feats.data)
                )
            topos.append(topo)
        feats = _CONV_T[cspec.kind](feats, topo, params, f"conv{idx}", ctx)
        outputs.append(feats)

    if spec.arch == "dgcnn":
        cat = ad.concat(outputs, axis=1)
        emb = _dense_block_t(cat, model.embed, "embed", ctx)
    else:
        emb = feats

    per = emb.reshape(n_graphs, spec.points, emb.shape[1])
    pooled = ad.concat([ad.tmax(per, axis=1), per.mean(axis=1)], axis=1)
    head = model.head
    if head.balance == "mean":
        pooled = pooled - pooled.mean(axis=0)
    elif head.balance == "median":
        # subgradient choice: the per-channel offset is treated as constant
        lower = np.sort(pooled.data, axis=0)[(pooled.shape[0] - 1) // 2]
        pooled = pooled - lower
    h = pooled
    for i, block in enumerate(head.blocks[:-1]):
        h = _dense_block_t(h, block, f"head{i}", ctx)
        if training and head.dropout > 0.0:
            if dropout_rng is None:
                raise ValueError("training-mode dropout needs an rng")
            h = ad.dropout(h, head.dropout, dropout_rng, training)
    logits = _dense_block_t(h, head.blocks[-1], f"head{len(head.blocks) - 1}", ctx)

    if collect:
        return logits, {"topologies": topos, "transfer": transfer}
    return logits


# -- losses -----------------------------------------------------------------


def cross_entropy_t(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    lsm = ad.log_softmax(logits)
    picked = lsm[np.arange(labels.shape[0]), labels]
    return -picked.mean()


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    # mirrors ad.log_softmax operation for operation so that equal inputs
    # give bitwise-equal outputs
    shift = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    return shift - lse


def logit_match_t(student_logits: Tensor, teacher_logits: np.ndarray,
                  temperature: float) -> Tensor:
    """Temperature-scaled KL(teacher || student), times T^2.

    Exactly zero when the logits coincide: both sides run the same softened
    log-softmax expression, so the per-class differences cancel bitwise.
    """
    inv_t = 1.0 / temperature
    log_t = _log_softmax_np(np.asarray(teacher_logits, dtype=np.float64) * inv_t)
    t_prob = np.exp(log_t)
    log_s = ad.log_softmax(student_logits * inv_t)
    per_sample = (t_prob * (log_t - log_s)).sum(axis=1)
    return per_sample.mean() * (temperature * temperature)


def _lsp_scores_np(feats: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                   kind: str) -> np.ndarray:
    if kind == "rbf":
        diff = feats[rows] - feats[cols]
        return -(diff * diff).sum(axis=1)
    if kind == "hamming":
        # exp(-(sum_k (1 - x_ik x_jk)) / 2) before the softmax; as a log
        # score that is (dot - d) / 2
        return ((feats[rows] * feats[cols]).sum(axis=1) - feats.shape[1]) * 0.5
    raise ValueError(f"unknown similarity kind: {kind!r}")


def _lsp_log_probs_np(feats, rows, cols, n, kind):
    scores = _lsp_scores_np(feats, rows, cols, kind)
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, rows, scores)
    z = np.exp(scores - shift[rows])
    denom = np.zeros(n)
    np.add.at(denom, rows, z)
    return (scores - shift[rows]) - np.log(denom)[rows]


def _lsp_log_probs_t(feats: Tensor, rows, cols, n, kind) -> Tensor:
    fi, fj = ad.gather_rows(feats, rows), ad.gather_rows(feats, cols)
    if kind == "rbf":
        diff = fi - fj
        scores = -(diff * diff).sum(axis=1)
    elif kind == "hamming":
        scores = ((fi * fj).sum(axis=1) - feats.shape[1]) * 0.5
    else:
        raise ValueError(f"unknown similarity kind: {kind!r}")
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, rows, scores.data)
    stable = scores - shift[rows]
    z = ad.exp(stable)
    denom = ad.segment_sum(z, rows, n)
    return stable - ad.gather_rows(ad.log(denom), rows)


def lsp_loss_t(
    student_feats: Tensor,
    teacher_feats: np.ndarray,
    student_topo,
    teacher_topo,
    kind: str = "rbf",
) -> Tensor:
    """Local-similarity-preserving loss at one transfer point.

    Softmax distributions over the union of student and teacher neighbour
    sets, compared with KL(teacher || student), averaged over nodes. Zero
    exactly when features and topologies coincide.
    """
    cols, indptr = neighbour_union(student_topo, teacher_topo)
    n = student_topo.n
    rows = np.repeat(np.arange(n), np.diff(indptr))
    log_t = _lsp_log_probs_np(
        np.asarray(teacher_feats, dtype=np.float64), rows, cols, n, kind
    )
    t_prob = np.exp(log_t)
    log_s = _lsp_log_probs_t(student_feats, rows, cols, n, kind)
    per_edge = (log_t - log_s) * t_prob
    return ad.segment_sum(per_edge, rows, n).mean()


def distillation_loss_t(
    logits: Tensor,
    labels: np.ndarray,
    aux: dict,
    teacher_logits: np.ndarray,
    teacher_aux: dict,
    dcfg: DistillConfig,
) -> tuple[Tensor, dict]:
    """(1 - alpha) CE + alpha T^2 KL + lambda sum of per-layer LSP terms."""
    ce = cross_entropy_t(logits, labels)
    kd = logit_match_t(logits, teacher_logits, dcfg.temperature)
    loss = ce * (1.0 - dcfg.alpha) + kd * dcfg.alpha
    lsp_value = 0.0
    if dcfg.lsp_weight > 0.0 and aux["transfer"]:
        terms = []
        for sf, tf, st, tt in zip(
            aux["transfer"], teacher_aux["transfer"],
            aux["topologies"][1:], teacher_aux["topologies"][1:],
        ):
            terms.append(lsp_loss_t(sf, tf, st, tt, dcfg.lsp_similarity))
        lsp = terms[0]
        for t in terms[1:]:
            lsp = lsp + t
        loss = loss + lsp * dcfg.lsp_weight
        lsp_value = float(lsp.data)
    parts = {"ce": float(ce.data), "kd": float(kd.data), "lsp": lsp_value}
    return loss, parts


class TeacherCache:
    """Per-cloud teacher outputs, assembled into batches on demand.

    Teacher inference is deterministic and fully per-graph (eval-mode batch
    norm, per-graph topologies), so outputs computed once per cloud can be
    stitched together for any batch composition. This takes the teacher's
    forward pass out of the per-step cost entirely.
    """

    def __init__(self, teacher: Model, clouds: np.ndarray, batch_graphs: int = 32):
        spec = teacher.spec
        self.points = spec.points
        n = clouds.shape[0]
        self.logits = np.empty((n, spec.classes))
        self.transfer: list[np.ndarray] = []
        self.neighbours: list[np.ndarray] = []
        for lo in range(0, n, batch_graphs):
            chunk = clouds[lo : lo + batch_graphs]
            b = chunk.shape[0]
            logits, aux = forward_eval(
                teacher, chunk.reshape(-1, chunk.shape[-1]), n_graphs=b,
                collect=True,
            )
            self.logits[lo : lo + b] = logits
            if not self.transfer:
                for t in aux["transfer"]:
                    self.transfer.append(
                        np.empty((n, self.points, t.shape[1]))
                    )
                for topo in aux["topologies"][1:]:
                    self.neighbours.append(
                        np.empty((n, self.points, topo.k), dtype=np.int32)
                    )
            for layer, t in enumerate(aux["transfer"]):
                self.transfer[layer][lo : lo + b] = t.reshape(
                    b, self.points, -1
                )
            for layer, topo in enumerate(aux["topologies"][1:]):
                local = topo.neighbours.reshape(b, self.points, topo.k)
                offsets = (np.arange(b) * self.points).reshape(-1, 1, 1)
                self.neighbours[layer][lo : lo + b] = local - offsets

    def batch(self, idx: np.ndarray):
        """Teacher logits and aux dict for the clouds in idx, batch-shaped."""
        b = idx.shape[0]
        transfer = [t[idx].reshape(b * self.points, -1) for t in self.transfer]
        offsets = (np.arange(b) * self.points).reshape(-1, 1, 1)
        topos = [None]
        for neigh in self.neighbours:
            stacked = (neigh[idx] + offsets).reshape(b * self.points, -1)
            topos.append(GraphTopology(stacked.astype(np.int32)))
        return self.logits[idx], {"transfer": transfer, "topologies": topos}


# -- optimizer and maintenance ----------------------------------------------


class Adam:
    """Adam with optional coupled weight decay on selected parameters."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay_keys: frozenset[str] | set[str] = frozenset(),
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_keys = set(decay_keys)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, arr in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(arr)
            if self.weight_decay and k in self.decay_keys:
                g = g + self.weight_decay * arr
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view for checkpointing (step count under 'step')."""
        out = {"step": np.array([float(self.t)])}
        for k in self.params:
            out[f"{k}.m"] = self.m[k]
            out[f"{k}.v"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["step"][0])
        for k in self.params:
            np.copyto(self.m[k], arrays[f"{k}.m"])
            np.copyto(self.v[k], arrays[f"{k}.v"])


def augment_clouds(clouds: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random anisotropic scale in [2/3, 3/2] per cloud plus clipped jitter.

    Returns a new (graphs, points, 3) array; the inputs are untouched.
    """
    scale = rng.uniform(2.0 / 3.0, 3.0 / 2.0, size=(clouds.shape[0], 1, 3))
    out = clouds * scale
    jitter = rng.normal(0.0, 0.01, size=clouds.shape)
    np.clip(jitter, -0.05, 0.05, out=jitter)
    out += jitter
    return out


def latent_maintenance(model: Model) -> None:
    """Keep sign-mode latents centred per output channel and inside [-1, 1].

    Centring stops channels from saturating to a constant sign; clipping
    keeps every latent inside the straight-through window so its gradient
    never dies permanently.
    """
    for _, p in model.all_layer_params():
        if p.weight_mode == "sign" and isinstance(p.weights, np.ndarray):
            w = p.weights
            w -= w.mean(axis=1, keepdims=True)
            np.clip(w, -1.0, 1.0, out=w)


def lr_at(epoch: int, total: int, base: float, decay: float,
          milestones: tuple[float, ...], every: int = 0) -> float:
    """Stepwise schedule: fractional milestones, or a fixed period if
    `every` is set (the final-stage convention)."""
    if every > 0:
        return base * decay ** (epoch // every)
    factor = 1.0
    for frac in milestones:
        if epoch >= int(round(frac * total)):
            factor *= decay
    return base * factor


# -- the trainer ------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    final_train_acc: float = 0.0
    final_test_acc: float = 0.0
    opt_state: dict = field(default_factory=dict)


def train_model(
    model: Model,
    dataset: PointCloudDataset,
    tcfg: TrainConfig,
    teacher: Model | None = None,
    dcfg: DistillConfig | None = None,
    log=None,
    lr_override: float | None = None,
    wd_override: float | None = None,
    periodic_decay: int = 0,
    epochs_override: int | None = None,
) -> TrainResult:
    """Run the optimization loop; mutates and returns the model.

    With a teacher the loss switches from plain cross entropy to the
    distillation objective. `log`, if given, is called as
    log(epoch, split, metric, value) after each measurement.
    """
    if dataset.points != model.spec.points:
        raise ValueError(
            f"dataset has {dataset.points}-point clouds, model wants "
            f"{model.spec.points}"
        )
    if teacher is not None and dcfg is None:
        raise ValueError("distillation needs a DistillConfig")
    tune_allocator()
    epochs = tcfg.epochs if epochs_override is None else epochs_override
    base_lr = tcfg.lr if lr_override is None else lr_override
    wd = tcfg.weight_decay if wd_override is None else wd_override

    rng = np.random.default_rng(tcfg.seed)
    shuffle_rng, dropout_rng, augment_rng = rng.spawn(3)
    train_x, train_y = dataset.subset("train")
    test_x, test_y = dataset.subset("test")
    if train_x.shape[0] == 0:
        raise ValueError("dataset has no training split")

    params = named_parameters(model)
    decay_keys = {k for k in params if k.endswith(".w")}
    if tcfg.decay_gamma:
        decay_keys |= {k for k in params if ".g." in k}
    opt = Adam(params, lr=base_lr, weight_decay=wd, decay_keys=decay_keys)

    def emit(epoch, split, metric, value):
        if log is not None:
            log(epoch, split, metric, value)

    cache = None
    if teacher is not None and epochs > 0 and not tcfg.augment:
        # augmentation resamples the inputs per batch, so cached
        # per-cloud teacher outputs would no longer describe them
        cache = TeacherCache(teacher, train_x)

    result = TrainResult(model=model)
    for epoch in range(epochs):
        opt.lr = lr_at(
            epoch, epochs, base_lr, tcfg.lr_decay, tcfg.lr_milestones,
            periodic_decay,
        )
        order = shuffle_rng.permutation(train_x.shape[0])
        loss_sum = 0.0
        part_sums = {"ce": 0.0, "kd": 0.0, "lsp": 0.0}
        for lo in range(0, order.shape[0], tcfg.batch_size):
            idx = order[lo : lo + tcfg.batch_size]
            batch = train_x[idx]
            if tcfg.augment:
                batch = augment_clouds(batch, augment_rng)
            coords = batch.reshape(-1, train_x.shape[-1])
            labels = train_y[idx]
            pt = build_param_tensors(params)
            if teacher is None:
                logits = forward_train(
                    model, coords, pt, n_graphs=idx.shape[0],
                    dropout_rng=dropout_rng,
                )
                loss = cross_entropy_t(logits, labels)
                parts = {"ce": float(loss.data), "kd": 0.0, "lsp": 0.0}
            else:
                logits, aux = forward_train(
                    model, coords, pt, n_graphs=idx.shape[0],
                    dropout_rng=dropout_rng, collect=True,
                )
                if cache is not None:
                    t_logits, t_aux = cache.batch(idx)
                else:
                    t_logits, t_aux = forward_eval(
                        teacher, coords, n_graphs=idx.shape[0], collect=True
                    )
                loss, parts = distillation_loss_t(
                    logits, labels, aux, t_logits, t_aux, dcfg
                )
            loss.backward()
            opt.step({k: t.grad for k, t in pt.items()})
            latent_maintenance(model)
            loss_sum += float(loss.data) * idx.shape[0]
            for key in part_sums:
                part_sums[key] += parts[key] * idx.shape[0]
            # drop this tape before the next forward allocates its own
            del pt, logits, loss

        n_train = train_x.shape[0]
        record = {"epoch": epoch, "loss": loss_sum / n_train, "lr": opt.lr}
        emit(epoch, "train", "loss", record["loss"])
        if teacher is not None:
            for key in ("ce", "kd", "lsp"):
                record[key] = part_sums[key] / n_train
                emit(epoch, "train", key, record[key])
        if (epoch + 1) % max(tcfg.eval_every, 1) == 0 or epoch == epochs - 1:
            record["train_acc"] = evaluate_accuracy(model, train_x, train_y)
            emit(epoch, "train", "accuracy", record["train_acc"])
            if test_x.shape[0]:
                record["test_acc"] = evaluate_accuracy(model, test_x, test_y)
                emit(epoch, "test", "accuracy", record["test_acc"])
        result.history.append(record)

    result.final_train_acc = (
        evaluate_accuracy(model, train_x, train_y) if epochs else 0.0
    )
    result.final_test_acc = (
        evaluate_accuracy(model, test_x, test_y)
        if epochs and test_x.shape[0]
        else 0.0
    )
    result.opt_state = opt.state_arrays()
    return result


# -- cascaded distillation --------------------------------------------------


@dataclass
class CascadeResult:
    teacher: Model
    stages: dict[str, TrainResult] = field(default_factory=dict)

    @property
    def final(self) -> Model:
        return self.stages["stage3"].model


def train_float_teacher(
    dataset: PointCloudDataset, tcfg: TrainConfig, size: str = "mini",
    classes: int = 3, k: int | None = None, arch: str = "dgcnn", log=None,
) -> TrainResult:
    spec = make_spec(
        variant="float", size=size, classes=classes, k=k,
        points=dataset.points, arch=arch,
    )
    model = init_model(spec, seed=tcfg.seed)
    return train_model(model, dataset, tcfg, log=log)


def cascaded_distillation(
    dataset: PointCloudDataset,
    teacher: Model,
    variant: str,
    tcfg: TrainConfig,
    dcfg: DistillConfig,
    size: str = "mini",
    classes: int = 3,
    k: int | None = None,
    arch: str = "dgcnn",
    mode: str = "cascade",
    log=None,
    until_stage: int = 3,
) -> CascadeResult:
    """Distil a binary model from a real-valued teacher.

    mode "cascade" runs the three-stage relaxation, each stage learning
    from the previous one; until_stage stops it early. mode "direct"
    distils the fully quantized model straight from the teacher; mode
    "scratch" trains it without a teacher.
    """

    def spec_for(stage):
        return make_spec(
            variant=variant, size=size, stage=stage, classes=classes, k=k,
            points=dataset.points, arch=arch,
        )

    def stage_log(tag):
        if log is None:
            return None
        return lambda e, s, m, v: log(e, f"{tag}/{s}", m, v)

    result = CascadeResult(teacher=teacher)
    if mode == "scratch":
        model = init_model(spec_for(3), seed=tcfg.seed)
        result.stages["stage3"] = train_model(
            model, dataset, tcfg, log=stage_log("stage3"), wd_override=0.0,
            lr_override=dcfg.stage3_lr, epochs_override=dcfg.stage3_epochs,
            periodic_decay=_stage3_period(dcfg),
        )
        return result
    if mode == "direct":
        model = init_model(spec_for(3), seed=tcfg.seed)
        result.stages["stage3"] = train_model(
            model, dataset, tcfg, teacher=teacher, dcfg=dcfg,
            log=stage_log("stage3"), wd_override=0.0,
            lr_override=dcfg.stage3_lr, epochs_override=dcfg.stage3_epochs,
            periodic_decay=_stage3_period(dcfg),
        )
        return result
    if mode != "cascade":
        raise ValueError(f"unknown distillation mode: {mode!r}")

    stage1 = init_model(spec_for(1), seed=tcfg.seed)
    result.stages["stage1"] = train_model(
        stage1, dataset, tcfg, teacher=teacher, dcfg=dcfg,
        log=stage_log("stage1"), epochs_override=dcfg.stage1_epochs,
    )
    if until_stage == 1:
        return result

    stage2 = init_model(spec_for(2), seed=tcfg.seed)
    copy_parameters(stage1, stage2)
    result.stages["stage2"] = train_model(
        stage2, dataset, tcfg, teacher=stage1, dcfg=dcfg,
        log=stage_log("stage2"), epochs_override=dcfg.stage2_epochs,
        lr_override=tcfg.lr * dcfg.stage2_lr_scale,
    )
    if until_stage == 2:
        return result

    stage3 = init_model(spec_for(3), seed=tcfg.seed + 1)
    if dcfg.teacher_init:
        copy_parameters(stage2, stage3)
    result.stages["stage3"] = train_model(
        stage3, dataset, tcfg, teacher=stage2, dcfg=dcfg,
        log=stage_log("stage3"), wd_override=0.0,
        lr_override=dcfg.stage3_lr, epochs_override=dcfg.stage3_epochs,
        periodic_decay=_stage3_period(dcfg),
    )
    return result


def _stage3_period(dcfg: DistillConfig) -> int:
    if dcfg.stage3_decay_every > 0:
        return dcfg.stage3_decay_every
    return max(dcfg.stage3_epochs // 7, 1)
