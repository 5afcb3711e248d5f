"""Command line front end: train, distill, infer, convert, bench.

Every run writes its artifacts into one output directory together with a
manifest.json recording the config hash, seed, thread count and code
version, enough to reproduce the run. Metric logs are append-only
tab-separated lines of epoch, split, metric, value. Commands exit 0 on
success and nonzero with a diagnostic on stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import pin_threads, run_benchmarks
from .modelio import (
    KIND_CHECKPOINT,
    KIND_DEPLOY,
    ModelFileError,
    RunConfig,
    dataset_from_config,
    load_model,
    load_xyz_dataset,
    parse_config,
    read_model,
    save_model,
    spec_from_config,
    stored_binary_bits,
    write_model,
)
from .network import (
    convert_to_deploy,
    evaluate_accuracy,
    forward_eval,
    init_model,
    predict,
)
from .training import (
    cascaded_distillation,
    train_float_teacher,
    train_model,
    tune_allocator,
)


class MetricsLog:
    """Append-only metric log, one epoch/split/metric/value line per call."""

    def __init__(self, path, echo: bool = True):
        self.path = Path(path)
        self.echo = echo

    def __call__(self, epoch, split, metric, value):
        val = repr(float(value)) if isinstance(value, float) else str(value)
        line = f"{epoch}\t{split}\t{metric}\t{val}"
        with self.path.open("a") as fh:
            fh.write(line + "\n")
        if self.echo:
            print(line)


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path(f"run-{command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args, command: str) -> RunConfig:
    if not args.config:
        raise ValueError(f"{command} needs --config")
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def write_manifest(out: Path, command: str, argv, cfg: RunConfig,
                   seed: int, threads: int) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_sha256": cfg.config_hash or None,
        "seed": seed,
        "threads": threads,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _predict_batched(model, clouds, batch_graphs: int = 16) -> np.ndarray:
    """Per-cloud predictions, batched exactly like evaluate_accuracy."""
    preds = np.empty(clouds.shape[0], dtype=np.int64)
    for lo in range(0, clouds.shape[0], batch_graphs):
        chunk = clouds[lo : lo + batch_graphs]
        stacked = chunk.reshape(-1, chunk.shape[-1])
        preds[lo : lo + batch_graphs] = predict(model, stacked, chunk.shape[0])
    return preds


def _log_checkpoint_eval(log, path, dataset, epoch: int) -> None:
    """Reload a written checkpoint and log its accuracy as the final eval.

    Checkpoints store real weights in f32, so this is measured on what the
    file actually contains; an infer run on the same file reproduces these
    numbers bitwise.
    """
    reloaded, _ = read_model(path)
    train_x, train_y = dataset.subset("train")
    log(epoch, "train", "accuracy", evaluate_accuracy(reloaded, train_x, train_y))
    test_x, test_y = dataset.subset("test")
    if test_x.shape[0]:
        log(epoch, "test", "accuracy", evaluate_accuracy(reloaded, test_x, test_y))


def cmd_train(args) -> int:
    cfg = _load_config(args, "train")
    threads = pin_threads(args.threads)
    dataset = dataset_from_config(cfg)
    out = _out_dir(args, "train")
    write_manifest(out, "train", args.argv, cfg, cfg.train.seed, threads)
    log = MetricsLog(out / "metrics.tsv")

    model = init_model(spec_from_config(cfg), seed=cfg.train.seed)
    result = train_model(model, dataset, cfg.train, log=log)

    path = out / "model.bgnn"
    extra = {"config_sha256": cfg.config_hash, "seed": cfg.train.seed}
    write_model(path, result.model, KIND_CHECKPOINT, extra=extra,
                opt_state=result.opt_state)
    _log_checkpoint_eval(log, path, dataset, cfg.train.epochs)
    print(f"saved {path} ({path.stat().st_size} bytes)")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args, "distill")
    if cfg.model.variant == "float":
        raise ValueError(
            "distillation target must be a binary variant (rf, bf1, bf2); "
            "the config says model.variant = float"
        )
    threads = pin_threads(args.threads)
    dataset = dataset_from_config(cfg)
    out = _out_dir(args, "distill")
    write_manifest(out, "distill", args.argv, cfg, cfg.train.seed, threads)
    log = MetricsLog(out / "metrics.tsv")
    extra = {"config_sha256": cfg.config_hash, "seed": cfg.train.seed}

    mode, until = "cascade", 3
    if args.stage in ("direct", "scratch"):
        mode = args.stage
    else:
        until = int(args.stage)

    teacher = None
    if args.model:
        teacher, _ = read_model(args.model)
    elif mode != "scratch":
        tres = train_float_teacher(
            dataset, cfg.train, size=cfg.model.size, classes=cfg.model.classes,
            k=cfg.model.k or None, arch=cfg.model.arch,
            log=lambda e, s, m, v: log(e, f"teacher/{s}", m, v),
        )
        teacher = tres.model
        write_model(out / "teacher.bgnn", teacher, KIND_CHECKPOINT,
                    extra=extra, opt_state=tres.opt_state)

    result = cascaded_distillation(
        dataset, teacher, cfg.model.variant, cfg.train, cfg.distill,
        size=cfg.model.size, classes=cfg.model.classes, k=cfg.model.k or None,
        arch=cfg.model.arch, mode=mode, log=log, until_stage=until,
    )

    last = None
    for name, res in result.stages.items():
        write_model(out / f"model.{name}.bgnn", res.model, KIND_CHECKPOINT,
                    extra={**extra, "stage": name}, opt_state=res.opt_state)
        last = name
    final = result.stages[last]
    path = out / "model.bgnn"
    write_model(path, final.model, KIND_CHECKPOINT,
                extra={**extra, "stage": last}, opt_state=final.opt_state)
    stage_epochs = {
        "stage1": cfg.distill.stage1_epochs,
        "stage2": cfg.distill.stage2_epochs,
        "stage3": cfg.distill.stage3_epochs,
    }
    _log_checkpoint_eval(log, path, dataset, stage_epochs[last])
    print(f"saved {path} ({last}, {path.stat().st_size} bytes)")
    return 0


def cmd_infer(args) -> int:
    if not args.model:
        raise ValueError("infer needs --model")
    model, _ = read_model(args.model)
    if args.data:
        dataset = load_xyz_dataset(args.data)
    elif args.config:
        dataset = dataset_from_config(parse_config(args.config))
    else:
        raise ValueError("infer needs --config or --data to supply a dataset")
    dim = dataset.clouds.shape[-1]
    if dataset.points != model.spec.points or dim != model.spec.in_dim:
        raise ValueError(
            f"model expects clouds of {model.spec.points} points x "
            f"{model.spec.in_dim} features, data has {dataset.points} x {dim}"
        )
    threads = pin_threads(args.threads)
    out = _out_dir(args, "infer")
    cfg = parse_config(args.config) if args.config else RunConfig()
    seed = 0 if args.seed is None else args.seed
    write_manifest(out, "infer", args.argv, cfg, seed, threads)
    log = MetricsLog(out / "metrics.tsv")

    rows = []
    correct_all = total_all = 0
    for split in ("train", "test"):
        clouds, labels = dataset.subset(split)
        if clouds.shape[0] == 0:
            continue
        preds = _predict_batched(model, clouds)
        for i, (lab, pred) in enumerate(zip(labels, preds)):
            rows.append(f"{split}\t{i}\t{lab}\t{pred}")
        correct = int((preds == labels).sum())
        log(0, split, "accuracy", correct / clouds.shape[0])
        correct_all += correct
        total_all += clouds.shape[0]
    log(0, "all", "accuracy", correct_all / total_all)

    pred_path = out / "predictions.tsv"
    pred_path.write_text("split\tindex\tlabel\tpredicted\n" + "\n".join(rows) + "\n")
    print(f"wrote {pred_path} ({total_all} clouds)")
    return 0


def cmd_convert(args) -> int:
    if not args.model:
        raise ValueError("convert needs --model")
    blob = Path(args.model).read_bytes()
    model, info = load_model(blob)
    deploy = convert_to_deploy(model)

    # cheap end-to-end identity probe before anything is written
    rng = np.random.default_rng(0)
    coords = rng.standard_normal((model.spec.points, model.spec.in_dim))
    if not np.array_equal(forward_eval(model, coords), forward_eval(deploy, coords)):
        raise AssertionError("converted model diverged from the checkpoint")

    threads = pin_threads(args.threads)
    out = _out_dir(args, "convert")
    seed = 0 if args.seed is None else args.seed
    write_manifest(out, "convert", args.argv, RunConfig(), seed, threads)
    data = save_model(deploy, KIND_DEPLOY, extra=info.get("extra", {}))
    path = out / "model.deploy.bgnn"
    path.write_bytes(data)
    print(
        f"wrote {path}: {len(data)} bytes, {len(blob) / len(data):.1f}x smaller "
        f"than the checkpoint, {stored_binary_bits(data)} weight bits packed; "
        "logits verified identical"
    )
    return 0


def cmd_bench(args) -> int:
    cfg = parse_config(args.config) if args.config else RunConfig()
    out = _out_dir(args, "bench")
    seed = 0 if args.seed is None else args.seed
    write_manifest(out, "bench", args.argv, cfg, seed, args.threads)
    report = run_benchmarks(cfg.bench, threads=args.threads)
    (out / "bench.txt").write_text(report.text())
    (out / "bench.tsv").write_text(report.table())
    print(report.text(), end="")
    print(f"wrote {out / 'bench.txt'} and {out / 'bench.tsv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bgnn",
        description="binary graph neural networks: train, distill, infer, "
                    "convert, bench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="INI run configuration")
        p.add_argument("--model", metavar="PATH", help="model file to load")
        p.add_argument("--data", metavar="PATH",
                       help="dataset directory (xyz files + manifest.tsv)")
        p.add_argument("--out", metavar="PATH",
                       help="output directory (default run-<command>)")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the training seed from the config")
        p.add_argument("--threads", type=int, default=1, metavar="N",
                       help="thread count for BLAS and kernels (default 1)")

    p = sub.add_parser("train", help="train the model a config describes")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill",
                       help="distil a binary model from a real-valued teacher")
    common(p)
    p.add_argument("--stage", choices=["1", "2", "3", "direct", "scratch"],
                   default="3",
                   help="run the cascade up to this stage, or distil the "
                        "hard model directly, or train it from scratch")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("infer", help="classify a dataset with a saved model")
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("convert",
                       help="pack a trained checkpoint into the deploy format")
    common(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("bench", help="time the binary kernels against float")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.argv = list(argv) if argv is not None else sys.argv[1:]
    tune_allocator()
    try:
        return args.func(args)
    except (ValueError, ModelFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
