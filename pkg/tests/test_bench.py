"""Benchmark harness checks.

These keep run counts tiny: the point is that the harness measures what it
says (right number of calls, medians over the recorded times, matching
results before timing), not that the machine is fast.
"""

import numpy as np
import pytest

from bgnn.bench import (
    BenchReport,
    Comparison,
    KernelTiming,
    bench_breakdown,
    bench_forward,
    bench_gemm,
    bench_pairwise,
    forward_heap_peaks,
    machine_descriptor,
    pin_threads,
    run_benchmarks,
    time_fn,
)
from bgnn.modelio import BenchConfig


SMALL = BenchConfig(runs=3, gemm_m=32, gemm_n=24, gemm_d=64,
                    pairwise_n=40, pairwise_d=64)


class TestHarness:
    def test_time_fn_call_count(self):
        calls = []
        times = time_fn(lambda: calls.append(1), runs=5, warmup=2)
        assert len(calls) == 7
        assert times.shape == (5,)
        assert np.all(times >= 0.0)

    def test_timing_from_known_times(self):
        t = KernelTiming.from_times("x", np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
        assert t.median_ms == 3.0
        assert t.iqr_ms == 2.0
        assert t.runs == 5

    def test_comparison_speedup(self):
        c = Comparison(
            "x",
            KernelTiming("x/float", 10.0, 0.0, 3),
            KernelTiming("x/binary", 2.5, 0.0, 3),
        )
        assert c.speedup == 4.0

    def test_comparison_measure_interleaves(self):
        order = []
        c = Comparison.measure(
            "toy", lambda: order.append("f"), lambda: order.append("b"),
            runs=4, warmup=1,
        )
        assert order == ["f", "b"] * 5
        assert c.baseline.runs == c.binary.runs == 4

    def test_pin_threads_validates(self):
        with pytest.raises(ValueError):
            pin_threads(0)
        assert pin_threads(1) == 1

    def test_machine_descriptor_mentions_numpy(self):
        assert "numpy" in machine_descriptor()


class TestKernelBenches:
    def test_gemm_sides_agree_and_report(self):
        c = bench_gemm(SMALL)
        assert "gemm" in c.name
        assert c.baseline.median_ms > 0 and c.binary.median_ms > 0

    def test_pairwise_report(self):
        c = bench_pairwise(SMALL)
        assert "pairwise" in c.name
        assert c.binary.note

    def test_forward_pair(self):
        c = bench_forward("mini", runs=2)
        assert "128 pts" in c.name

    def test_breakdown_covers_shared_ops(self):
        entries = bench_breakdown(runs=2, n=64, k=8, d=64)
        names = {e.name for e in entries}
        assert {"graph/pairwise", "graph/topk", "conv/gemm",
                "conv/concat", "conv/maxpool", "conv/bn_sign"} <= names
        assert all(e.median_ms >= 0.0 for e in entries)

    def test_heap_peaks_positive(self):
        peaks = forward_heap_peaks("mini")
        assert set(peaks) == {"forward/float mini", "forward/binary mini"}
        assert all(v > 0.0 for v in peaks.values())


class TestReport:
    def _report(self):
        return BenchReport(
            machine="test box",
            threads=1,
            runs=3,
            comparisons=[Comparison(
                "gemm 8x8x8",
                KernelTiming("gemm/float", 4.0, 0.5, 3),
                KernelTiming("gemm/binary", 1.0, 0.1, 3, note="packed"),
            )],
            breakdown=[KernelTiming("graph/topk", 2.0, 0.2, 3, "ranking")],
            peak_heap_mb={"forward/float mini": 3.5},
            peak_rss_mb=100.0,
        )

    def test_text_sections(self):
        text = self._report().text()
        for needle in ("test box", "gemm 8x8x8", "4.00x", "graph/topk",
                       "peak process rss"):
            assert needle in text

    def test_table_is_parseable(self):
        lines = self._report().table().strip().split("\n")
        header = lines[0].split("\t")
        assert header[0] == "kind"
        rows = [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]
        comp = [r for r in rows if r["kind"] == "comparison"][0]
        assert float(comp["speedup"]) == 4.0
        brk = [r for r in rows if r["kind"] == "breakdown"][0]
        assert float(brk["binary_ms"]) == 2.0
        assert brk["note"] == "ranking"

    def test_run_benchmarks_smoke(self):
        rep = run_benchmarks(SMALL, threads=1, sizes=("mini",), forward_runs=2)
        assert rep.threads == 1
        assert len(rep.comparisons) == 3
        assert rep.breakdown
        assert rep.peak_rss_mb > 0
        assert "binary kernel benchmark" in rep.text()
