"""Timings for the hot kernels on this machine.

Medians over repeated calls; absolute numbers are machine-specific, the
interesting part is how each kernel scales with its input.
"""
from growflow.bench import run_benches

results = run_benches(out_file="demo_bench.tsv", repetitions=10)
print(f"{'kernel':12s} {'scale':10s} {'median':>12s} {'throughput':>16s}")
for r in results:
    ms = r.wall_ns / 1e6
    print(f"{r.kernel:12s} {r.scale:10s} {ms:10.2f} ms "
          f"{r.throughput / 1e3:12.1f}k {r.unit}")
print("wrote demo_bench.tsv")
