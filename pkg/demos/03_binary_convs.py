"""Binarized edge convolutions, from relaxed to fully binary.

The conv family comes in three flavours that trade precision for bits:
real weights with binary-friendly structure (rf), binary weights with
real activations (stage 2), and binary everything (bf1/bf2, which differ
only in where the batch norm sits relative to aggregation). A learned
rescale after the XNOR GEMM restores the dynamic range the signs threw
away. This script runs one cloud through each flavour and verifies what
stays binary.
"""

import numpy as np

from bgnn.network import forward_eval, init_model, make_spec
from bgnn.ops import batch_norm, xoredgeconv
from bgnn.bitcore import sign_quantize
from bgnn.graph import knn_l2, knn_score_matmul
from bgnn.network import feature_metric

rng = np.random.default_rng(2)
coords = rng.standard_normal((128, 3))

print("== the three quantization levels ==")
for variant in ("float", "rf", "bf2"):
    spec = make_spec(variant=variant, size="mini")
    model = init_model(spec, seed=0)
    logits = forward_eval(model, coords)
    kinds = [c.kind for c in spec.convs]
    print(f"{variant:>6}: convs={kinds} logits={np.round(logits, 3)}")

print("\n== a fully binary stack stays binary ==")
spec = make_spec(variant="bf1", size="full", classes=40, points=128)
model = init_model(spec, seed=0)
feats = sign_quantize(batch_norm(coords, model.stem_bn, training=False))
topo = knn_l2(coords, spec.k)
pick = {"score": knn_score_matmul, "l2": knn_l2}
for i, (cspec, params) in enumerate(zip(spec.convs, model.conv_params)):
    if i > 0:
        topo = pick[feature_metric(feats)](feats, spec.k)
    feats = xoredgeconv(feats, topo, params, training=False)
    values = np.unique(feats)
    print(f"layer {i} ({cspec.out_channels} ch): values {values}")
    assert set(values) <= {-1.0, 1.0}

print("\n== what the rescale buys ==")
spec = make_spec(variant="bf2", size="mini")
model = init_model(spec, seed=0)
p = model.conv_params[0]
print(f"gamma shape {np.shape(p.gamma.alpha)}: one positive scale per "
      f"output channel, learned jointly with the binary weights")
print("without it every XNOR output would sit on the same integer grid")
