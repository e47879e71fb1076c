"""Time and memory of the graph-filter variants relative to the sparse full-sphere recurrence.

    python demos/bench.py [nside]
"""
import sys

from shdeconv.bench import ablation_table, stack_memory_ratio

nside = int(sys.argv[1]) if len(sys.argv) > 1 else 4
results, gates = ablation_table(nsides=(nside,), dims=(8, 8, 8), K=5, reps=20, warmup=3)
for r in results:
    print(f"{r.variant:>22}  {r.median_ms:8.2f} ms  {r.pct_of_baseline_time:6.1f}% time  "
          f"{r.pct_of_baseline_mem:6.1f}% mem  gate {'ok' if r.ok else 'FAILED'}")
hemi_b, sphere_b = stack_memory_ratio(nside, K=5)
print(f"hemisphere / sphere Chebyshev stack bytes: {hemi_b / sphere_b:.3f}")
