"""The command line, end to end in a temp directory.

One config file drives everything: train writes a checkpoint plus an
append-only metric log and a manifest that pins config hash, seed and
thread count; infer reproduces the training log's final accuracy from
the saved file; convert packs the checkpoint for deployment; bench times
the kernels against their float counterparts. Runs scaled down to finish
in about a minute.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

CONFIG = """
[model]
variant = bf2
size = mini
classes = 3
points = 32

[data]
kind = synth
points = 32
train_per_class = 10
test_per_class = 5

[train]
epochs = 2
batch_size = 8
seed = 1

[distill]
stage1_epochs = 1
stage2_epochs = 1
stage3_epochs = 1

[bench]
runs = 5
gemm_m = 256
gemm_n = 256
gemm_d = 256
pairwise_n = 256
pairwise_d = 256
"""


def run(*argv):
    print(f"\n$ bgnn {' '.join(argv)}")
    proc = subprocess.run([sys.executable, "-m", "bgnn", *argv],
                          capture_output=True, text=True)
    tail = proc.stdout.strip().split("\n")[-6:]
    print("\n".join(f"  {line}" for line in tail))
    if proc.returncode != 0:
        print(f"  stderr: {proc.stderr.strip()}")
    return proc.returncode


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    cfg = root / "run.ini"
    cfg.write_text(CONFIG)

    assert run("train", "--config", str(cfg), "--out", str(root / "t")) == 0
    manifest = json.loads((root / "t" / "manifest.json").read_text())
    print(f"\nmanifest pins: seed={manifest['seed']} "
          f"threads={manifest['threads']} "
          f"config={manifest['config_sha256'][:12]}...")

    assert run("infer", "--model", str(root / "t" / "model.bgnn"),
               "--config", str(cfg), "--out", str(root / "i")) == 0

    assert run("distill", "--config", str(cfg), "--stage", "scratch",
               "--out", str(root / "d")) == 0

    assert run("convert", "--model", str(root / "d" / "model.bgnn"),
               "--out", str(root / "c")) == 0

    assert run("bench", "--config", str(cfg), "--out", str(root / "b")) == 0

    # bad input for completeness: unknown config keys are refused
    (root / "bad.ini").write_text("[train]\nepcohs = 5\n")
    rc = run("train", "--config", str(root / "bad.ini"),
             "--out", str(root / "x"))
    print(f"\nmisspelled config key exits {rc} (diagnostic above)")
