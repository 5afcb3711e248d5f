"""Model files: checkpoints, deployment packs, and what corruption looks like.

A checkpoint keeps float32 latent weights plus optimizer moments so
training can resume; a deploy file packs every sign-mode matrix down to
one bit per weight. Conversion changes the bytes, never the maths: the
packed model answers bit for bit what the checkpoint answered. The format
carries a checksum, so flipped bytes fail loudly instead of loading as
garbage weights.
"""

import numpy as np

from bgnn.modelio import (
    KIND_CHECKPOINT,
    KIND_DEPLOY,
    BadChecksumError,
    load_model,
    save_model,
    stored_binary_bits,
)
from bgnn.network import convert_to_deploy, forward_eval, init_model, make_spec

rng = np.random.default_rng(3)
model = init_model(make_spec(variant="bf1", size="full", classes=40), seed=0)
coords = rng.standard_normal((model.spec.points, 3))

print("== checkpoint vs deploy ==")
checkpoint = save_model(model, KIND_CHECKPOINT)
deploy = save_model(convert_to_deploy(model), KIND_DEPLOY)
print(f"checkpoint: {len(checkpoint):>9} bytes (f32 latents, resumable)")
print(f"deploy:     {len(deploy):>9} bytes "
      f"({stored_binary_bits(deploy)} weights at one bit each)")
print(f"ratio:      {len(checkpoint) / len(deploy):9.1f}x")

print("\n== conversion preserves every logit ==")
# files round real parameters to f32, so the fair comparison is between
# the two files, which is what inference actually loads
from_checkpoint, _ = load_model(checkpoint)
from_deploy, info = load_model(deploy)
before = forward_eval(from_checkpoint, coords)
after = forward_eval(from_deploy, coords)
print(f"kind={info['kind']} logits identical: {np.array_equal(before, after)}")
assert np.array_equal(before, after)

print("\n== round trip through bytes ==")
reloaded, _ = load_model(checkpoint)
again = save_model(reloaded, KIND_CHECKPOINT)
print(f"save -> load -> save is byte-stable: {again == checkpoint}")

print("\n== corruption is caught ==")
broken = bytearray(deploy)
broken[len(broken) // 2] ^= 0xFF
try:
    load_model(bytes(broken))
    print("loaded corrupted file?!")
except BadChecksumError as exc:
    print(f"rejected: {exc}")
