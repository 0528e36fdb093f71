"""
How much memory does the static baseline waste?
================================================

Generates the seeded synthetic trace and looks at the baseline assignment
against measured peak RSS.
"""
import numpy as np

from buildmem import evaluate, synthetic, trace

ds = synthetic.sample_dataset()
print(f"{len(ds)} builds, {ds.summary.rows_dropped} rows dropped at parse time")

stats = trace.baseline_stats(ds)
for k in ("median_unused_pct", "underalloc_rate", "bin_count"):
    print(f"{k:>20}: {stats[k]}")

# unused share of successful builds, 10% buckets
unused = trace.unused_fraction(ds)
ok = np.array([not r.baseline_underallocated() for r in ds])
hist, edges = np.histogram(100 * unused[ok], bins=10, range=(0, 100))
for lo, n in zip(edges[:-1], hist):
    print(f"{lo:5.0f}%  {'#' * (60 * n // hist.max())}")

# allocation classes of the baseline itself
classes = evaluate.classify_many([r.baseline_assigned_gb for r in ds], ds.max_rss_gb())
for c in evaluate.CLASS_ORDER:
    print(f"{evaluate.CLASS_LABELS[c]:<26} {np.mean(classes == c.value):6.1%}")
