"""Micro-benchmarks for the performance-sensitive kernels: full-frame
rendering, feature-grid interpolation, and one RK4 step.

Each kernel runs at three input scales; the reported time is the median
over the repetitions after a discarded warm-up call.  Results go to a
tab-separated file.  No absolute-time assertions belong in CI — consumers
should check relative scaling only.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import splat
from .core import Box, Camera, GaussianSet, normalize_quaternion
from .field import FieldConfig, eval_field, init_params
from .ode import GeomState, rk4_step
from .splat import RenderConfig

__all__ = ["BenchResult", "run_benches"]


@dataclass
class BenchResult:
    kernel: str
    scale: str
    wall_ns: float          # median per call
    throughput: float
    unit: str
    repetitions: int

    def to_tsv(self) -> str:
        return (f"{self.kernel}\t{self.scale}\t{self.wall_ns:.0f}"
                f"\t{self.throughput:.1f}\t{self.unit}\t{self.repetitions}")


def _median_time(fn, repetitions: int) -> float:
    fn()  # warm-up, discarded
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(np.median(samples))


def _render_scene(rng, n_gaussians: int, size: int):
    cam = Camera(np.eye(3), np.array([0.0, 0.0, 4.0]), size * 0.9, size * 0.9,
                 size / 2.0, size / 2.0, size, size)
    centers = np.stack([rng.uniform(-2, 2, n_gaussians),
                        rng.uniform(-2, 2, n_gaussians),
                        rng.uniform(-2.5, 2.5, n_gaussians)], axis=1)
    gs = GaussianSet(
        centers, normalize_quaternion(rng.normal(size=(n_gaussians, 4))),
        rng.uniform(-2.5, -1.0, (n_gaussians, 3)), rng.uniform(-1, 2, n_gaussians),
        rng.uniform(0, 1, (n_gaussians, 3)), np.ones(n_gaussians, dtype=bool))
    return gs, cam


def _bench_render(repetitions: int):
    rng = np.random.default_rng(0)
    out = []
    for size in (64, 128, 256):
        gs, cam = _render_scene(rng, 64, size)
        ns = _median_time(lambda: splat.render(gs, cam, cfg=RenderConfig()),
                          repetitions)
        out.append(BenchResult("render", f"{size}x{size}", ns,
                               size * size / (ns * 1e-9), "pixels/s", repetitions))
    return out


def _bench_hex_interp(repetitions: int):
    rng = np.random.default_rng(1)
    params = init_params(Box([0, 0, 0], [1, 1, 1]), seed=0,
                         config=FieldConfig(levels=2, features=8,
                                            spatial_resolution=64,
                                            temporal_resolution=25))
    out = []
    for n in (100, 1_000, 10_000):
        pos = rng.uniform(0, 1, (n, 3))
        ns = _median_time(lambda: eval_field(pos, 0.5, params), repetitions)
        out.append(BenchResult("hex_interp", f"{n}q", ns, n / (ns * 1e-9),
                               "queries/s", repetitions))
    return out


def _bench_rk4(repetitions: int):
    rng = np.random.default_rng(2)
    out = []
    for n in (16, 128, 1024):
        gs = GaussianSet(
            rng.uniform(0, 1, (n, 3)), normalize_quaternion(rng.normal(size=(n, 4))),
            rng.uniform(-3, -2, (n, 3)), np.zeros(n), rng.uniform(0, 1, (n, 3)),
            np.ones(n, dtype=bool))
        state = GeomState.from_gaussians(gs)
        a = rng.normal(scale=0.2, size=(3, 3))

        def fld(comps, t):
            mu = comps[0]
            return (mu @ a, np.zeros((n, 4)), np.zeros((n, 3)))

        ns = _median_time(lambda: rk4_step(fld, state, 0.0, 0.05), repetitions)
        out.append(BenchResult("rk4_step", f"{n}g", ns, n / (ns * 1e-9),
                               "states/s", repetitions))
    return out


_SUITES = {
    "render": _bench_render,
    "hex_interp": _bench_hex_interp,
    "rk4_step": _bench_rk4,
}


def run_benches(suite_filter: str = "", out_file=None,
                repetitions: int = 10) -> list[BenchResult]:
    """Run the kernels whose names contain ``suite_filter``; write a TSV
    table when ``out_file`` is given.  Repetitions below 10 are raised to
    the contract minimum."""
    repetitions = max(repetitions, 10)
    results: list[BenchResult] = []
    for name, fn in _SUITES.items():
        if suite_filter and suite_filter not in name:
            continue
        results.extend(fn(repetitions))
    if out_file is not None:
        lines = ["kernel\tscale\twall_ns\tthroughput\tunit\trepetitions"]
        lines += [r.to_tsv() for r in results]
        Path(out_file).parent.mkdir(parents=True, exist_ok=True)
        Path(out_file).write_text("\n".join(lines) + "\n")
    return results
