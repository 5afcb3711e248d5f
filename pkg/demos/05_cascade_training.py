"""Training a binary classifier by cascaded distillation.

Quantizing a trained network in one step usually craters its accuracy;
the cascade walks there in stages instead. Stage 1 relaxes both
quantizers to tanh and learns from the float teacher; stage 2 hardens
the activations while weights stay real; stage 3 hardens everything and
learns from stage 2. Each stage matches the previous stage's logits and
its layerwise neighbourhood-similarity structure, not just the labels.

Scaled down to run in about two minutes; expect the float teacher and
the relaxed stages to solve this small task outright and the fully
binary student to land close behind.
"""

import numpy as np

from bgnn.modelio import DistillConfig, TrainConfig, synth_dataset
from bgnn.network import evaluate_accuracy
from bgnn.training import cascaded_distillation, train_float_teacher, tune_allocator

tune_allocator()

ds = synth_dataset(n_train_per_class=60, n_test_per_class=20, n_points=64)
test_x, test_y = ds.subset("test")
tcfg = TrainConfig(epochs=2, batch_size=16, eval_every=100, seed=0)

print("== float teacher ==")
teacher = train_float_teacher(ds, tcfg, size="mini", k=8)
print(f"teacher test accuracy: {teacher.final_test_acc:.3f}")

print("\n== cascade: tanh -> hard activations -> hard everything ==")
dcfg = DistillConfig(stage1_epochs=2, stage2_epochs=2, stage3_epochs=3)
result = cascaded_distillation(
    ds, teacher.model, "bf2", tcfg, dcfg, size="mini", k=8,
    log=lambda e, s, m, v: print(f"  {s} epoch {e}: {m} {v:.4f}")
    if m == "loss" else None,
)
for name, stage in result.stages.items():
    spec = stage.model.spec
    print(f"{name}: act={spec.quantizer:>4} weight={spec.weight_quantizer:>4} "
          f"test acc {evaluate_accuracy(stage.model, test_x, test_y):.3f}")

print("\nthe stage-3 model runs on XNOR and popcount alone; "
      "see 04_model_files.py for what that saves on disk")
