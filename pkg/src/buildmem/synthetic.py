"""Seeded generator of build traces in the export format.

The generated data mimics the structure of a CI build-trace export: memory
depends on component, branch, build profile, target list and parallelism,
with a slowly drifting per-configuration level (so history features carry
signal) and lognormal noise. Baseline assignments come from a static table
keyed on component, architecture, optimization level and location, snapped up
to the 22 allocation bins, which reproduces the over-allocation pattern of
empirically configured requirements.
"""
from __future__ import annotations

import csv
import io

import numpy as np

from .trace import DEFAULT_BINS_GB, GIB, TraceDataset, parse_trace

COMPONENTS = {
    "core": 42.0,
    "indexserver": 55.0,
    "sqlopt": 24.0,
    "persistence": 18.0,
    "client": 6.0,
    "tools": 4.0,
    "python_support": 3.0,
    "spatial": 14.0,
    "textsearch": 10.0,
    "replication": 12.0,
    "tests": 8.0,
    "docs": 2.0,
}
BRANCHES = {
    "master": 1.0,
    "rel/2.0": 0.95,
    "rel/1.0": 0.85,
    "feature/alpha": 0.6,
    "feature/beta": 0.7,
    "feature/gamma": 0.5,
    "feature/delta": 1.1,
    "hotfix/2.0.1": 0.9,
}
ARCHS = {"x86_64": 1.0, "ppc64le": 1.25, "aarch64": 1.1}
COMPILERS = {"gcc13": 1.0, "gcc14": 1.05, "clang17": 0.85}
OPTS = {"opt": 1.0, "rel": 1.1, "dbg": 1.7, "cov": 2.0}
MAKE_TYPE = {"opt": "Optimized", "rel": "Release", "dbg": "Debug", "cov": "Coverage"}
LOCATIONS = ("dc-walldorf", "dc-stleon", "cloud-a")
TARGETS = {
    "all": 1.0,
    "all,dist": 1.35,
    "core": 0.8,
    "core,tests": 0.95,
    "dist": 1.2,
    "all,dist,tests": 1.45,
}

HEADER = (
    "time", "branch", "buildProfile", "jobs", "location", "makeType", "targets",
    "localJobs", "component", "max_rss", "memory_fail_count", "maxMemoryUsageBytes",
    "baseline_assigned_gb", "duration_s",
)


def _pick(rng, options, p=None):
    keys = list(options)
    return keys[rng.choice(len(keys), p=p)]


def generate_rows(n: int = 6000, seed: int = 0, weeks: float = 8.0, start: float = 1_704_067_200.0):
    """Return a list of dicts keyed by export header names, in time order."""
    rng = np.random.default_rng(seed)
    span = weeks * 7 * 86400
    # diurnal arrival profile: most builds during working hours
    t = np.sort(start + rng.uniform(0, span, size=n * 4))
    hour = ((t - start) % 86400) / 3600
    keep = rng.uniform(size=t.size) < (0.25 + 0.75 * np.exp(-((hour - 13) ** 2) / 18))
    t = t[keep]
    t = np.sort(t[rng.choice(t.size, size=min(n, t.size), replace=False)])

    comp_p = np.array([3, 3, 2, 2, 2, 1.5, 1, 1, 1, 1, 1.5, 0.5])
    branch_p = np.array([5, 2, 1, 1, 1, 0.6, 0.6, 0.4])
    drift = {}
    rows = []
    for ts in t:
        comp = _pick(rng, COMPONENTS, comp_p / comp_p.sum())
        branch = _pick(rng, BRANCHES, branch_p / branch_p.sum())
        arch = _pick(rng, ARCHS, [0.6, 0.2, 0.2])
        compiler = _pick(rng, COMPILERS, [0.5, 0.3, 0.2])
        opt = _pick(rng, OPTS, [0.5, 0.2, 0.2, 0.1])
        loc = LOCATIONS[rng.choice(3, p=[0.45, 0.35, 0.2])]
        targets = _pick(rng, TARGETS, [0.35, 0.2, 0.15, 0.1, 0.1, 0.1])
        jobs = int(rng.choice([16, 32, 48, 64, 96], p=[0.1, 0.3, 0.2, 0.3, 0.1]))
        local_jobs = int(rng.choice([0, 4, 8, 16], p=[0.3, 0.3, 0.3, 0.1]))
        make_type = MAKE_TYPE[opt] if rng.uniform() > 0.05 else "Optimized"
        profile = f"linux{arch}-{compiler}-{opt}"

        key = (branch, comp, arch, opt)
        level = drift.get(key, 0.0)
        level = 0.85 * level + rng.normal(0, 0.08)
        drift[key] = level
        weeks_in = (ts - start) / (7 * 86400)
        gb = (
            COMPONENTS[comp]
            * BRANCHES[branch]
            * ARCHS[arch]
            * COMPILERS[compiler]
            * OPTS[opt]
            * TARGETS[targets]
            * (0.55 + 0.45 * jobs / 64)
            * (1.0 + 0.01 * weeks_in)
            * np.exp(level + rng.normal(0, 0.18))
        )
        rss = int(gb * GIB)
        usage = int(rss * rng.uniform(1.03, 1.25))
        duration = float(round(
            600 + 90 * COMPONENTS[comp] * OPTS[opt] * (64 / jobs) ** 0.5 * rng.lognormal(0, 0.3), 1
        ))
        rows.append({
            "time": float(round(ts, 3)),
            "branch": branch,
            "buildProfile": profile,
            "jobs": jobs,
            "location": loc,
            "makeType": make_type,
            "targets": targets,
            "localJobs": local_jobs,
            "component": comp,
            "max_rss": rss,
            "maxMemoryUsageBytes": usage,
            "duration_s": duration,
            "_cfg": (comp, arch, opt, loc),
        })

    _assign_baseline(rows, rng)
    for r in rows:
        del r["_cfg"]
    return rows


def _assign_baseline(rows, rng):
    # static table: one bin per (component, arch, opt, location), sized from the
    # configuration's upper tail with a random expert margin
    groups = {}
    for r in rows:
        groups.setdefault(r["_cfg"], []).append(r["max_rss"] / GIB)
    bins = np.array(DEFAULT_BINS_GB)
    table = {}
    for cfg in sorted(groups):
        q = float(np.quantile(groups[cfg], 0.9))
        want = q * float(rng.choice([0.95, 1.1, 1.3, 1.6, 2.2]))
        table[cfg] = float(bins[min(np.searchsorted(bins, want), bins.size - 1)])
    for r in rows:
        assigned = table[r["_cfg"]]
        r["baseline_assigned_gb"] = assigned
        oom = r["max_rss"] / GIB > assigned
        noisy = rng.uniform() < 0.01  # neighbour containers exhausting the node
        r["memory_fail_count"] = int(rng.integers(1, 5)) if (oom or noisy) else 0


def generate_csv(n: int = 6000, seed: int = 0, *, with_baseline: bool = True, **kwargs) -> str:
    rows = generate_rows(n, seed, **kwargs)
    header = [h for h in HEADER if with_baseline or h != "baseline_assigned_gb"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    return buf.getvalue()


def sample_dataset(n: int = 6000, seed: int = 0) -> TraceDataset:
    return parse_trace(generate_csv(n, seed), source=f"synthetic(n={n},seed={seed})")
