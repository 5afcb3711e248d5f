"""Model files, datasets, and run configuration.

File format (fixed little-endian layout, platform independent):

    magic "BGNN" | u16 version | u8 kind | u8 reserved | u32 header_len |
    header JSON | payload | u32 crc32(header + payload)

kind 0 is a deployment file: sign-mode weight matrices are stored as packed
bit rows (1 bit per weight, no latent shadow copy), every real tensor as
little-endian float32. kind 1 is a training checkpoint: the same layout but
weights stay as float32 latents and optimizer state rides along as extra
records. Loading either kind reconstructs a Model; loading a deployment file
yields packed weights that run on the popcount kernels.

All reals are stored as float32 in both kinds. Evaluation upcasts to float64
on entry, which is exact, so a checkpoint and the deployment file converted
from it produce bitwise-identical logits.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bitcore import BitMatrix, RescaleTensor, pack, sign_quantize, words_for
from .network import Model, ModelSpec, init_model
from .ops import LayerParams, PackedPair

MAGIC = b"BGNN"
FORMAT_VERSION = 1
KIND_DEPLOY = 0
KIND_CHECKPOINT = 1
_PREAMBLE = struct.Struct("<4sHBBI")


class ModelFileError(ValueError):
    """Base error for unreadable model files."""


class BadMagicError(ModelFileError):
    pass


class BadVersionError(ModelFileError):
    pass


class BadChecksumError(ModelFileError):
    pass


# -- serialization ----------------------------------------------------------


def _bit_payload(bm: BitMatrix) -> bytes:
    return bm.data.astype("<u8", copy=False).tobytes()


def _named_units(model: Model):
    """Deterministic walk over (name, LayerParams-or-stem) units."""
    units = []
    if model.stem_bn is not None:
        units.append(("stem", None))
    units.extend(model.all_layer_params())
    return units


def _collect_records(model: Model, kind: int, opt_state: dict | None):
    """Flatten a model into (meta, payload) record lists in walk order."""
    recs = []

    def add_f32(name, arr):
        arr = np.asarray(arr, dtype="<f4")
        recs.append(({"name": name, "kind": "f32", "shape": list(arr.shape)},
                     arr.tobytes()))

    def add_bits(name, bm: BitMatrix):
        recs.append(({"name": name, "kind": "bits", "rows": bm.rows, "dim": bm.dim},
                     _bit_payload(bm)))

    def add_bn(name, bn):
        add_f32(f"{name}.bn", np.stack([bn.mean, bn.var, bn.scale, bn.shift]))

    for name, p in _named_units(model):
        if p is None:  # the input stem
            add_bn("stem", model.stem_bn)
            continue
        w = p.weights
        if isinstance(w, PackedPair):
            add_bits(f"{name}.w.self", w.self_bits)
            add_bits(f"{name}.w.edge", w.edge_bits)
        elif isinstance(w, BitMatrix):
            add_bits(f"{name}.w", w)
        elif p.weight_mode == "sign" and kind == KIND_DEPLOY:
            ws = sign_quantize(np.asarray(w, dtype=np.float64))
            if ws.shape[1] % 2 == 0 and _is_split_conv(model, name):
                d = ws.shape[1] // 2
                add_bits(f"{name}.w.self", pack(ws[:, :d]))
                add_bits(f"{name}.w.edge", pack(ws[:, d:]))
            else:
                add_bits(f"{name}.w", pack(ws))
        else:
            add_f32(f"{name}.w", w)
        if p.gamma is not None:
            add_f32(f"{name}.g.alpha", p.gamma.alpha)
            if p.gamma.kind == "rank1":
                add_f32(f"{name}.g.beta", p.gamma.beta)
                add_f32(f"{name}.g.gamma", p.gamma.gamma)
        if p.bn is not None:
            add_bn(name, p.bn)
        if p.prelu is not None:
            add_f32(f"{name}.prelu", p.prelu)

    if kind == KIND_CHECKPOINT and opt_state:
        for pname in sorted(opt_state):
            add_f32(f"opt.{pname}", opt_state[pname])
    return recs


def _is_split_conv(model: Model, name: str) -> bool:
    """xoredgeconv weights are stored as self/edge halves."""
    if not name.startswith("conv"):
        return False
    idx = int(name[4:])
    return model.spec.convs[idx].kind.startswith("xoredgeconv")


def save_model(
    model: Model,
    kind: int = KIND_DEPLOY,
    extra: dict | None = None,
    opt_state: dict | None = None,
) -> bytes:
    """Serialize a model (deployment form or training checkpoint)."""
    if kind not in (KIND_DEPLOY, KIND_CHECKPOINT):
        raise ValueError(f"unknown file kind: {kind}")
    recs = _collect_records(model, kind, opt_state)
    header = {
        "format": FORMAT_VERSION,
        "spec": json.loads(model.spec.to_json()),
        "records": [meta for meta, _ in recs],
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(blob for _, blob in recs)
    crc = zlib.crc32(header_bytes + payload) & 0xFFFFFFFF
    return (
        _PREAMBLE.pack(MAGIC, FORMAT_VERSION, kind, 0, len(header_bytes))
        + header_bytes
        + payload
        + struct.pack("<I", crc)
    )


def write_model(path, model: Model, kind: int = KIND_DEPLOY,
                extra: dict | None = None, opt_state: dict | None = None) -> None:
    Path(path).write_bytes(save_model(model, kind, extra, opt_state))


def _read_record(meta: dict, blob: bytes):
    if meta["kind"] == "f32":
        arr = np.frombuffer(blob, dtype="<f4").reshape(meta["shape"])
        return arr.astype(np.float64)
    if meta["kind"] == "bits":
        rows, dim = meta["rows"], meta["dim"]
        words = np.frombuffer(blob, dtype="<u8").reshape(rows, words_for(dim))
        return BitMatrix(rows, dim, words.astype(np.uint64))
    raise ModelFileError(f"unknown record kind: {meta['kind']!r}")


def _record_nbytes(meta: dict) -> int:
    if meta["kind"] == "f32":
        return 4 * int(np.prod(meta["shape"])) if meta["shape"] else 4
    return 8 * meta["rows"] * words_for(meta["dim"])


def load_model(data: bytes):
    """Parse a model file; returns (model, info).

    info carries "kind", "extra", and for checkpoints the optimizer record
    dict under "opt_state". Raises BadMagicError / BadVersionError /
    BadChecksumError for the corresponding corruptions.
    """
    if len(data) < _PREAMBLE.size + 4:
        raise ModelFileError("file too short to be a model file")
    magic, version, kind, _, header_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported format version {version}")
    if kind not in (KIND_DEPLOY, KIND_CHECKPOINT):
        raise ModelFileError(f"unknown file kind {kind}")
    body_start = _PREAMBLE.size
    header_end = body_start + header_len
    if header_end + 4 > len(data):
        raise ModelFileError("truncated header")
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[body_start:-4]) & 0xFFFFFFFF != stored_crc:
        raise BadChecksumError("checksum mismatch: file corrupted")
    header = json.loads(data[body_start:header_end].decode())
    spec = ModelSpec.from_json(json.dumps(header["spec"]))

    records = {}
    offset = header_end
    for meta in header["records"]:
        n = _record_nbytes(meta)
        if offset + n > len(data) - 4:
            raise ModelFileError(f"truncated payload at record {meta['name']!r}")
        records[meta["name"]] = _read_record(meta, data[offset : offset + n])
        offset += n
    if offset != len(data) - 4:
        raise ModelFileError("trailing bytes after last record")

    model = _assemble(spec, records)
    info = {"kind": kind, "extra": header.get("extra", {})}
    if kind == KIND_CHECKPOINT:
        info["opt_state"] = {
            name[len("opt."):]: arr for name, arr in records.items()
            if name.startswith("opt.")
        }
    return model, info


def read_model(path):
    return load_model(Path(path).read_bytes())


def _assemble(spec: ModelSpec, records: dict) -> Model:
    """Rebuild a Model by filling an init skeleton with stored records."""
    model = init_model(spec, seed=0)

    def take(name):
        if name not in records:
            raise ModelFileError(f"missing record {name!r}")
        return records[name]

    def fill_bn(name, bn):
        packed = take(f"{name}.bn")
        if not isinstance(packed, np.ndarray) or packed.shape != (4, bn.channels):
            raise ModelFileError(f"record {name}.bn has wrong shape")
        bn.mean, bn.var, bn.scale, bn.shift = (packed[i].copy() for i in range(4))

    if model.stem_bn is not None:
        fill_bn("stem", model.stem_bn)

    for name, p in model.all_layer_params():
        if f"{name}.w.self" in records:
            p.weights = PackedPair(take(f"{name}.w.self"), take(f"{name}.w.edge"))
        else:
            w = take(f"{name}.w")
            if isinstance(w, np.ndarray):
                expected = np.asarray(p.weights).shape
                if w.shape != expected:
                    raise ModelFileError(
                        f"record {name}.w shape {w.shape} != expected {expected}"
                    )
            p.weights = w
        if p.gamma is not None:
            p.gamma = RescaleTensor(
                p.gamma.kind,
                take(f"{name}.g.alpha"),
                take(f"{name}.g.beta") if p.gamma.kind == "rank1" else None,
                take(f"{name}.g.gamma") if p.gamma.kind == "rank1" else None,
            )
        if p.bn is not None:
            fill_bn(name, p.bn)
        if p.prelu is not None:
            p.prelu = take(f"{name}.prelu")
    return model


def stored_binary_bits(data: bytes) -> int:
    """Number of weight bits in a file's bit records (excluding padding)."""
    _, _, _, _, header_len = _PREAMBLE.unpack_from(data, 0)
    header = json.loads(data[_PREAMBLE.size : _PREAMBLE.size + header_len].decode())
    return sum(
        m["rows"] * m["dim"] for m in header["records"] if m["kind"] == "bits"
    )


# -- datasets ---------------------------------------------------------------


@dataclass
class PointCloudDataset:
    """Fixed-size point clouds with labels and train/test split tags."""

    clouds: np.ndarray  # (N, points, 3) float64
    labels: np.ndarray  # (N,) int64
    split: np.ndarray  # (N,) str
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.clouds.ndim != 3 or self.clouds.shape[2] != 3:
            raise ValueError("clouds must be (N, points, 3)")
        if self.clouds.shape[1] == 0:
            raise ValueError("clouds must be nonempty")
        n = self.clouds.shape[0]
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValueError("labels/split must align with clouds")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside class range")

    @property
    def points(self) -> int:
        return self.clouds.shape[1]

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == split
        return self.clouds[mask], self.labels[mask]


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Scale a cloud so its farthest point sits on the unit sphere.

    Pure scaling, no centring: offsets from the origin carry class
    information for binary sign codes and must survive.
    """
    points = np.asarray(points, dtype=np.float64)
    radius = np.linalg.norm(points, axis=1).max() if points.size else 0.0
    return points / radius if radius > 0 else points.copy()


def load_xyz_dataset(path) -> PointCloudDataset:
    """Read a directory of "x y z"-per-line files listed in manifest.tsv.

    Manifest lines are "filename<TAB>label<TAB>split". Every cloud is
    normalized to the unit sphere; clouds must share one point count.
    """
    root = Path(path)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.tsv in {root}")
    entries = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ValueError(
                f"{manifest}:{lineno}: expected 'filename<TAB>label<TAB>split'"
            )
        fname, label, split = (p.strip() for p in parts)
        if split not in ("train", "test"):
            raise ValueError(f"{manifest}:{lineno}: unknown split {split!r}")
        entries.append((fname, label, split))
    if not entries:
        raise ValueError(f"{manifest}: empty manifest")

    class_names = tuple(sorted({label for _, label, _ in entries}))
    label_ids = {name: i for i, name in enumerate(class_names)}
    clouds, labels, splits = [], [], []
    n_points = None
    for fname, label, split in entries:
        fpath = root / fname
        if not fpath.is_file():
            raise FileNotFoundError(f"{manifest}: listed file missing: {fname}")
        rows = []
        for lineno, raw in enumerate(fpath.read_text().splitlines(), start=1):
            if not raw.strip():
                continue
            parts = raw.split()
            if len(parts) != 3:
                raise ValueError(f"{fpath}:{lineno}: expected three coordinates")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ValueError(f"{fpath}:{lineno}: {exc}") from None
        if not rows:
            raise ValueError(f"{fpath}: empty point cloud")
        if n_points is None:
            n_points = len(rows)
        elif len(rows) != n_points:
            raise ValueError(
                f"{fpath}: has {len(rows)} points, expected {n_points} "
                "(all clouds must share one point count)"
            )
        clouds.append(normalize_unit_sphere(np.array(rows)))
        labels.append(label_ids[label])
        splits.append(split)
    return PointCloudDataset(
        clouds=np.stack(clouds),
        labels=np.array(labels, dtype=np.int64),
        split=np.array(splits),
        class_names=class_names,
    )


def save_xyz_dataset(dataset: PointCloudDataset, path) -> None:
    """Write the loader's on-disk layout (used by demos and loader tests)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(dataset.clouds.shape[0]):
        fname = f"cloud_{i:05d}.xyz"
        body = "\n".join(
            " ".join(f"{v:.10g}" for v in row) for row in dataset.clouds[i]
        )
        (root / fname).write_text(body + "\n")
        lines.append(
            f"{fname}\t{dataset.class_names[dataset.labels[i]]}\t{dataset.split[i]}"
        )
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")


_SHAPE_CENTRES = {
    "sphere": np.array([0.55, 0.0, 0.05]),
    "cube": np.array([-0.5, -0.35, 0.2]),
    "planes": np.array([0.0, 0.55, -0.3]),
}


def _sample_shape(kind: str, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Surface samples of the synthetic class shapes, offset from the origin.

    The offsets matter: centred shapes all quantize to near-uniform sign
    codes under the binary input stem, which would make the classes
    indistinguishable to fully binary models.
    """
    if kind == "sphere":
        v = rng.normal(size=(n_points, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = 0.35 * v
    elif kind == "cube":
        half = 0.3
        face = rng.integers(0, 6, n_points)
        uv = rng.uniform(-half, half, (n_points, 2))
        pts = np.empty((n_points, 3))
        axis = face % 3
        side = np.where(face < 3, half, -half)
        for i in range(n_points):
            rest = [a for a in range(3) if a != axis[i]]
            pts[i, axis[i]] = side[i]
            pts[i, rest] = uv[i]
    elif kind == "planes":
        half = 0.35
        z = np.where(rng.random(n_points) < 0.5, 0.15, -0.15)
        xy = rng.uniform(-half, half, (n_points, 2))
        pts = np.column_stack([xy, z])
    else:
        raise ValueError(f"unknown shape kind: {kind!r}")
    pts = pts + _SHAPE_CENTRES[kind]
    pts += rng.normal(scale=0.01, size=pts.shape)
    return normalize_unit_sphere(pts)


def synth_dataset(
    n_train_per_class: int = 300,
    n_test_per_class: int = 60,
    n_points: int = 128,
    classes: tuple[str, ...] = ("sphere", "cube", "planes"),
    seed: int = 0,
) -> PointCloudDataset:
    """Deterministic synthetic shape-classification dataset."""
    rng = np.random.default_rng(seed)
    clouds, labels, splits = [], [], []
    for split, count in (("train", n_train_per_class), ("test", n_test_per_class)):
        for label, kind in enumerate(classes):
            for _ in range(count):
                clouds.append(_sample_shape(kind, n_points, rng))
                labels.append(label)
                splits.append(split)
    return PointCloudDataset(
        clouds=np.stack(clouds),
        labels=np.array(labels, dtype=np.int64),
        split=np.array(splits),
        class_names=tuple(classes),
    )


# -- run configuration ------------------------------------------------------


@dataclass
class ModelConfig:
    variant: str = "float"
    size: str = "mini"
    arch: str = "dgcnn"
    classes: int = 3
    k: int = 0  # 0 means the size default
    points: int = 0


@dataclass
class DataConfig:
    kind: str = "synth"
    path: str = ""
    points: int = 128
    train_per_class: int = 300
    test_per_class: int = 60
    seed: int = 0
    shapes: tuple[str, ...] = ("sphere", "cube", "planes")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    lr_decay: float = 0.5
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    eval_every: int = 1
    augment: bool = False
    decay_gamma: bool = False


@dataclass
class DistillConfig:
    temperature: float = 3.0
    alpha: float = 0.1
    lsp_weight: float = 100.0
    lsp_similarity: str = "rbf"
    stage1_epochs: int = 15
    stage2_epochs: int = 15
    stage3_epochs: int = 20
    stage2_lr_scale: float = 0.25
    stage3_lr: float = 1e-3
    stage3_decay_every: int = 0  # 0 means one seventh of the stage epochs
    teacher_init: bool = False


@dataclass
class BenchConfig:
    runs: int = 30
    gemm_m: int = 1024
    gemm_n: int = 1024
    gemm_d: int = 256
    pairwise_n: int = 1024
    pairwise_d: int = 256


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    config_hash: str = ""


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "distill": DistillConfig,
    "bench": BenchConfig,
}


def _convert(raw: str, template):
    if isinstance(template, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        parts = tuple(p.strip() for p in raw.split(",") if p.strip())
        if template and isinstance(template[0], float):
            return tuple(float(p) for p in parts)
        return parts
    return raw


def parse_config(path) -> RunConfig:
    """Read an INI run config; unknown sections or keys are an error."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    parser.read_string(text)
    cfg = RunConfig()
    unknown = []
    for section in parser.sections():
        if section not in _SECTIONS:
            unknown.append(section)
            continue
        target = getattr(cfg, section)
        valid = {f.name: getattr(target, f.name) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in valid:
                unknown.append(f"{section}.{key}")
                continue
            try:
                setattr(target, key, _convert(raw, valid[key]))
            except ValueError as exc:
                raise ValueError(f"config {section}.{key}: {exc}") from None
    if unknown:
        raise ValueError(
            "unknown config keys: " + ", ".join(sorted(unknown))
        )
    cfg.config_hash = hashlib.sha256(text.encode()).hexdigest()
    return cfg


def spec_from_config(cfg: RunConfig, stage: int | None = None) -> ModelSpec:
    from .network import make_spec

    m = cfg.model
    return make_spec(
        variant=m.variant,
        size=m.size,
        stage=stage,
        classes=m.classes,
        k=m.k or None,
        points=m.points or None,
        arch=m.arch,
    )


def dataset_from_config(cfg: RunConfig) -> PointCloudDataset:
    d = cfg.data
    if d.kind == "synth":
        return synth_dataset(
            n_train_per_class=d.train_per_class,
            n_test_per_class=d.test_per_class,
            n_points=d.points,
            classes=tuple(d.shapes),
            seed=d.seed,
        )
    if d.kind == "xyz":
        if not d.path:
            raise ValueError("data.kind=xyz needs data.path")
        return load_xyz_dataset(d.path)
    raise ValueError(f"unknown data kind: {d.kind!r}")
