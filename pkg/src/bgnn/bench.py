"""Kernel and end-to-end benchmarks for the binary engine.

Measurement discipline: every timed callable gets a few untimed warm-up
calls first (JIT compilation, BLAS pool spin-up, page faults on the input
buffers), then R timed repetitions of the bare call. File I/O never sits
inside a timed region, and packing costs are reported as their own rows
rather than folded into kernel times. Thread pools are pinned to a single
thread by default so the comparison is serial work against serial work;
the pinned count is recorded in the report.
"""

from __future__ import annotations

import os
import platform
import resource
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .bitcore import binary_gemm, concat_bits, pack, pairwise_hamming, sign_quantize
from .graph import pairwise_sq_l2, topology_from_distances
from .modelio import BenchConfig
from .network import convert_to_deploy, forward_eval, init_model, make_spec


def pin_threads(n: int = 1) -> int:
    """Limit BLAS/OpenMP pools to n threads; returns the applied count."""
    if n < 1:
        raise ValueError("thread count must be at least 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)
    os.environ["OMP_NUM_THREADS"] = str(n)
    return n


def time_fn(fn, runs: int, warmup: int = 3) -> np.ndarray:
    """Wall times in seconds for `runs` calls, after `warmup` untimed ones."""
    for _ in range(warmup):
        fn()
    out = np.empty(runs, dtype=np.float64)
    for i in range(runs):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out


@dataclass
class KernelTiming:
    """Median and spread of one kernel's wall time over repeated runs."""

    name: str
    median_ms: float
    iqr_ms: float
    runs: int
    note: str = ""

    @classmethod
    def measure(cls, name, fn, runs, note="", warmup=3):
        return cls.from_times(name, time_fn(fn, runs, warmup) * 1e3, note)

    @classmethod
    def from_times(cls, name, times_ms, note=""):
        q1, med, q3 = np.percentile(times_ms, [25.0, 50.0, 75.0])
        return cls(name, float(med), float(q3 - q1), len(times_ms), note)


@dataclass
class Comparison:
    """A float kernel and its binary counterpart on matched shapes."""

    name: str
    baseline: KernelTiming
    binary: KernelTiming

    @property
    def speedup(self) -> float:
        return self.baseline.median_ms / self.binary.median_ms

    @classmethod
    def measure(cls, name, baseline_fn, binary_fn, runs,
                baseline_name="", binary_name="", note="", warmup=3):
        """Time both sides with their runs interleaved.

        On a busy machine a burst of contention that lands entirely inside
        one kernel's run block skews that median alone; alternating the
        calls spreads any burst over both distributions, which keeps the
        ratio honest without changing what is measured.
        """
        for _ in range(warmup):
            baseline_fn()
            binary_fn()
        tb = np.empty(runs, dtype=np.float64)
        tq = np.empty(runs, dtype=np.float64)
        for i in range(runs):
            t0 = time.perf_counter()
            baseline_fn()
            tb[i] = time.perf_counter() - t0
            t0 = time.perf_counter()
            binary_fn()
            tq[i] = time.perf_counter() - t0
        return cls(
            name=name,
            baseline=KernelTiming.from_times(baseline_name or f"{name}/float",
                                             tb * 1e3),
            binary=KernelTiming.from_times(binary_name or f"{name}/binary",
                                           tq * 1e3, note),
        )


@dataclass
class BenchReport:
    machine: str
    threads: int
    runs: int
    comparisons: list[Comparison] = field(default_factory=list)
    breakdown: list[KernelTiming] = field(default_factory=list)
    peak_heap_mb: dict[str, float] = field(default_factory=dict)
    peak_rss_mb: float = 0.0

    def text(self) -> str:
        lines = [
            "binary kernel benchmark",
            f"machine: {self.machine}",
            f"threads: {self.threads}   runs per timing: {self.runs} "
            "(medians; spread is the interquartile range)",
            "",
            f"{'comparison':<34}{'float ms':>10}{'binary ms':>11}{'speedup':>9}",
        ]
        for c in self.comparisons:
            lines.append(
                f"{c.name:<34}{c.baseline.median_ms:>10.3f}"
                f"{c.binary.median_ms:>11.3f}{c.speedup:>8.2f}x"
            )
        if self.peak_heap_mb:
            lines.append("")
            lines.append("peak heap during one forward pass (MiB, tracemalloc):")
            for name, mb in self.peak_heap_mb.items():
                lines.append(f"  {name:<32}{mb:>10.2f}")
        if self.breakdown:
            lines.append("")
            lines.append(f"{'per-op breakdown':<34}{'ms':>10}   note")
            for t in self.breakdown:
                lines.append(f"{t.name:<34}{t.median_ms:>10.3f}   {t.note}")
        lines.append("")
        lines.append(f"peak process rss: {self.peak_rss_mb:.0f} MiB")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Tab-separated form, one row per timing."""
        cols = [
            "kind", "name", "float_ms", "binary_ms", "speedup",
            "float_iqr_ms", "binary_iqr_ms", "runs", "note",
        ]
        rows = ["\t".join(cols)]
        for c in self.comparisons:
            rows.append("\t".join([
                "comparison", c.name,
                repr(c.baseline.median_ms), repr(c.binary.median_ms),
                repr(c.speedup),
                repr(c.baseline.iqr_ms), repr(c.binary.iqr_ms),
                str(c.baseline.runs), c.binary.note or c.baseline.note,
            ]))
        for t in self.breakdown:
            rows.append("\t".join([
                "breakdown", t.name, "", repr(t.median_ms), "",
                "", repr(t.iqr_ms), str(t.runs), t.note,
            ]))
        for name, mb in self.peak_heap_mb.items():
            rows.append("\t".join([
                "peak_heap_mb", name, "", repr(mb), "", "", "", "", "",
            ]))
        return "\n".join(rows) + "\n"


def machine_descriptor() -> str:
    model = platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    model = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return (
        f"{model}, {os.cpu_count()} cpus, {platform.system()} "
        f"{platform.release()}, python {platform.python_version()}, "
        f"numpy {np.__version__}"
    )


def bench_gemm(cfg: BenchConfig, runs: int | None = None) -> Comparison:
    """Dense float GEMM against the packed XNOR/popcount GEMM.

    Both sides multiply the same {-1,+1} matrices, so the products agree
    exactly; that identity is asserted once before timing starts. The
    float side is the expression the real-valued layers actually use.
    """
    runs = runs or cfg.runs
    rng = np.random.default_rng(0)
    x = sign_quantize(rng.standard_normal((cfg.gemm_m, cfg.gemm_d)))
    w = sign_quantize(rng.standard_normal((cfg.gemm_n, cfg.gemm_d)))
    xb, wb = pack(x), pack(w)
    if not np.array_equal(binary_gemm(xb, wb), x @ w.T):
        raise AssertionError("binary gemm disagrees with the float product")
    shape = f"{cfg.gemm_m}x{cfg.gemm_n}x{cfg.gemm_d}"
    return Comparison.measure(
        f"gemm {shape}", lambda: x @ w.T, lambda: binary_gemm(xb, wb), runs,
        baseline_name=f"gemm/float {shape}", binary_name=f"gemm/binary {shape}",
        note="pre-packed operands",
    )


def bench_pairwise(cfg: BenchConfig, runs: int | None = None) -> Comparison:
    """All-pairs float squared-l2 against all-pairs Hamming on packed rows."""
    runs = runs or cfg.runs
    rng = np.random.default_rng(1)
    x = rng.standard_normal((cfg.pairwise_n, cfg.pairwise_d))
    xb = pack(sign_quantize(x))
    shape = f"{cfg.pairwise_n}x{cfg.pairwise_d}"
    return Comparison.measure(
        f"pairwise {shape}", lambda: pairwise_sq_l2(x),
        lambda: pairwise_hamming(xb), runs,
        baseline_name=f"pairwise/float {shape}",
        binary_name=f"pairwise/binary {shape}", note="pre-packed rows",
    )


def _forward_pair(size: str):
    """A float model and a packed fully-binarized one of matching size."""
    fm = init_model(make_spec(variant="float", size=size), seed=0)
    bm = convert_to_deploy(init_model(make_spec(variant="bf1", size=size), seed=0))
    rng = np.random.default_rng(2)
    coords = rng.standard_normal((fm.spec.points, fm.spec.in_dim))
    coords /= np.abs(coords).max()
    return fm, bm, coords


def bench_forward(size: str, runs: int) -> Comparison:
    """End-to-end single-cloud classification forward, float vs binary."""
    fm, bm, coords = _forward_pair(size)
    return Comparison.measure(
        f"forward {size} ({fm.spec.points} pts)",
        lambda: forward_eval(fm, coords), lambda: forward_eval(bm, coords),
        runs,
        baseline_name=f"forward/float {size}",
        binary_name=f"forward/binary {size}",
        note="packed deploy model; graph build and pooling stay shared",
    )


def forward_heap_peaks(size: str) -> dict[str, float]:
    """Peak traced heap (MiB) of one forward call per model flavour.

    tracemalloc sees numpy buffer allocations, so this is a usable proxy
    for working-set size; it slows the call down, so these runs are never
    the timed ones.
    """
    fm, bm, coords = _forward_pair(size)
    peaks = {}
    for name, model in ((f"forward/float {size}", fm), (f"forward/binary {size}", bm)):
        forward_eval(model, coords)  # warm caches outside the trace
        tracemalloc.start()
        forward_eval(model, coords)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        peaks[name] = peak / 2**20
    return peaks


def bench_breakdown(runs: int, n: int = 1024, k: int = 20,
                    d: int = 256) -> list[KernelTiming]:
    """Per-op cost of one binarized conv layer plus its graph step.

    Separates what the bit representation accelerates (the GEMM, the
    pairwise distances) from the ops every variant pays for unchanged:
    top-k selection, edge-feature concatenation, neighbourhood max, and
    the float batch-norm/threshold between layers.
    """
    rng = np.random.default_rng(3)
    feats = sign_quantize(rng.standard_normal((n, d)))
    fb = pack(feats)
    w = pack(sign_quantize(rng.standard_normal((d, 2 * d))))
    dist = pairwise_hamming(fb).astype(np.float64)
    topo = topology_from_distances(dist, k)
    centre = pack(sign_quantize(rng.standard_normal((n * k, d))))
    neigh = pack(feats[topo.neighbours.reshape(-1)])
    edge = concat_bits([centre, neigh])
    agg = binary_gemm(edge, w)
    pre_act = rng.standard_normal((n, 2 * d))
    scale = rng.standard_normal(2 * d) * 0.1 + 1.0
    shift = rng.standard_normal(2 * d) * 0.1

    shapes = f"n={n} k={k} d={d}"
    return [
        KernelTiming.measure(
            "graph/pairwise", lambda: pairwise_hamming(fb), runs,
            note=f"packed XOR+popcount, {shapes}"),
        KernelTiming.measure(
            "graph/topk", lambda: topology_from_distances(dist, k), runs,
            note="integer ranking; not binarizable"),
        KernelTiming.measure(
            "conv/gemm", lambda: binary_gemm(edge, w), runs,
            note=f"edge tensor ({n * k}x{2 * d}) x weights"),
        KernelTiming.measure(
            "conv/concat", lambda: concat_bits([centre, neigh]), runs,
            note="edge-feature assembly; index shuffling both paths pay"),
        KernelTiming.measure(
            "conv/maxpool", lambda: agg.reshape(n, k, -1).max(axis=1), runs,
            note="neighbourhood max; comparison tree, shared"),
        KernelTiming.measure(
            "conv/bn_sign",
            lambda: sign_quantize(pre_act * scale + shift), runs,
            note="inter-layer affine + threshold; stays in floats"),
    ]


def run_benchmarks(cfg: BenchConfig, threads: int = 1,
                   sizes: tuple[str, ...] = ("mini", "full"),
                   forward_runs: int | None = None) -> BenchReport:
    """The full suite: kernel comparisons, end-to-end forwards, breakdown."""
    report = BenchReport(
        machine=machine_descriptor(),
        threads=pin_threads(threads),
        runs=cfg.runs,
    )
    report.comparisons.append(bench_gemm(cfg))
    report.comparisons.append(bench_pairwise(cfg))
    fruns = forward_runs or cfg.runs
    for size in sizes:
        report.comparisons.append(bench_forward(size, fruns))
        report.peak_heap_mb.update(forward_heap_peaks(size))
    report.breakdown = bench_breakdown(cfg.runs)
    report.peak_rss_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
    return report
