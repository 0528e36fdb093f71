"""Allocation-quality metrics and plot-ready data.

``set`` is the assigned memory of a build (baseline or refined) and ``req``
its measured peak. Five classes partition ``set / req``:

=============  =========================
under          set < req
well           req <= set <= 2 req
severe_over    2 req < set <= 3 req
extreme_over   3 req < set <= 4 req
massive_over   set > 4 req
=============  =========================
"""
from __future__ import annotations

import csv
import json
import math
import os
from datetime import datetime, timezone
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import CardinalityMismatch, NonPositiveReq
from .trace import TraceDataset

REPORT_SCHEMA = "buildmem.report/1"


class AllocationClass(str, Enum):
    UNDER = "under"
    WELL = "well"
    SEVERE = "severe_over"
    EXTREME = "extreme_over"
    MASSIVE = "massive_over"


# display order, most over-allocated first
CLASS_ORDER = (
    AllocationClass.MASSIVE,
    AllocationClass.EXTREME,
    AllocationClass.SEVERE,
    AllocationClass.WELL,
    AllocationClass.UNDER,
)
CLASS_LABELS = {
    AllocationClass.MASSIVE: "Massively overallocating",
    AllocationClass.EXTREME: "Extremely overallocating",
    AllocationClass.SEVERE: "Severely overallocating",
    AllocationClass.WELL: "Well allocating",
    AllocationClass.UNDER: "Under allocating",
}
OVER_CLASSES = (AllocationClass.MASSIVE, AllocationClass.EXTREME, AllocationClass.SEVERE)

# production figures published for the internal dataset; recorded for
# comparison only, never reproduced from local data
REFERENCE_INTERNAL = {
    "baseline_shares": {"massive_over": 0.235, "extreme_over": 0.140, "severe_over": 0.265,
                        "well": 0.281, "under": 0.079},
    "ensemble_shares": {"massive_over": 0.038, "extreme_over": 0.0401, "severe_over": 0.127,
                        "well": 0.766, "under": 0.0289},
    "ensemble_mean_savings_gb": 37.0,
    "ensemble_savings_sigma_gb": 40.0,
    "ensemble_remaining_potential_gb": 51.0,
    "ensemble_underalloc_rate": 0.0028,
    "baseline_underalloc_rate_masked": 0.0384,
    "classifier_mean_savings_gb": [9.0, 10.0],
    "classifier_remaining_potential_gb": 48.0,
    "classifier_underalloc_rate": 0.0014,
    "baseline_median_unused_pct": 60.9,
    "baseline_job_failure_rate": 0.086,
}


def classify_allocation(set_gb: float, req_gb: float) -> AllocationClass:
    if not req_gb > 0:
        raise NonPositiveReq(f"req must be > 0, got {req_gb!r}")
    if set_gb < req_gb:
        return AllocationClass.UNDER
    if set_gb <= 2 * req_gb:
        return AllocationClass.WELL
    if set_gb <= 3 * req_gb:
        return AllocationClass.SEVERE
    if set_gb <= 4 * req_gb:
        return AllocationClass.EXTREME
    return AllocationClass.MASSIVE


def classify_many(set_gb, req_gb) -> np.ndarray:
    """Vectorized classification; returns class values as an object array, None where req <= 0."""
    s = np.asarray(set_gb, dtype=float)
    r = np.asarray(req_gb, dtype=float)
    out = np.full(s.shape, None, dtype=object)
    ok = r > 0
    out[ok & (s > 4 * r)] = AllocationClass.MASSIVE.value
    out[ok & (s <= 4 * r)] = AllocationClass.EXTREME.value
    out[ok & (s <= 3 * r)] = AllocationClass.SEVERE.value
    out[ok & (s <= 2 * r)] = AllocationClass.WELL.value
    out[ok & (s < r)] = AllocationClass.UNDER.value
    return out


def _shares(classes) -> tuple[dict, dict, int]:
    valid = [c for c in classes if c is not None]
    counts = {c.value: 0 for c in CLASS_ORDER}
    for c in valid:
        counts[c] += 1
    n = len(valid)
    shares = {k: (v / n if n else 0.0) for k, v in counts.items()}
    return counts, shares, n


def savings_summary(decisions, records: Sequence, safety_factor: float = 1.0) -> dict:
    """Savings against the baseline assignment plus the under-allocation rate.

    ``remaining_potential_gb`` is the mean of ``max(final - safety_factor * req, 0)``.
    """
    final = np.array([d.final_gb for d in decisions], dtype=float)
    base = np.array([r.baseline_assigned_gb for r in records], dtype=float)
    req = np.array([r.max_rss_gb for r in records], dtype=float)
    if final.size != base.size:
        raise CardinalityMismatch(f"{final.size} decisions for {base.size} records")
    if final.size == 0:
        return {"mean_gb": 0.0, "sigma_gb": 0.0, "remaining_potential_gb": 0.0, "underalloc_rate": 0.0}
    sav = base - final
    pos = req > 0
    return {
        "mean_gb": float(sav.mean()),
        "sigma_gb": float(sav.std()),
        "remaining_potential_gb": float(np.maximum(final - safety_factor * req, 0.0).mean()),
        "underalloc_rate": float((final[pos] < req[pos]).mean()) if pos.any() else 0.0,
    }


def gbh_timeline(decisions, records: Sequence, bucket_s: float = 3600.0) -> dict:
    """Duration-weighted savings (GB x hours), cumulative over build end time."""
    if len(decisions) != len(records):
        raise CardinalityMismatch(f"{len(decisions)} decisions for {len(records)} records")
    points = []
    excluded = 0
    for d, r in zip(decisions, records):
        dur = r.duration_s
        if dur is None or not dur > 0:
            excluded += 1
            continue
        saving = r.baseline_assigned_gb - d.final_gb
        points.append((r.time + dur, saving, saving * dur / 3600.0))
    points.sort(key=lambda p: p[0])
    cumulative = np.cumsum([p[2] for p in points]) if points else np.zeros(0)
    series = [
        {"end_time": t, "savings_gb": s, "gbh": g, "cumulative_gbh": float(c)}
        for (t, s, g), c in zip(points, cumulative)
    ]
    buckets = []
    if points:
        t0 = math.floor(points[0][0] / bucket_s) * bucket_s
        acc = {}
        for t, _, g in points:
            k = int((t - t0) // bucket_s)
            acc[k] = acc.get(k, 0.0) + g
        total = 0.0
        for k in range(max(acc) + 1):
            total += acc.get(k, 0.0)
            buckets.append({"bucket_start": t0 + k * bucket_s, "gbh": acc.get(k, 0.0), "cumulative_gbh": total})
    return {
        "series": series,
        "buckets": buckets,
        "total_gbh": float(cumulative[-1]) if points else 0.0,
        "excluded_records": excluded,
    }


def _strategy_block(set_gb, req, base, sf, records, mask=None) -> dict:
    classes = classify_many(set_gb, req)
    counts, shares, n = _shares(classes)
    sav = base - set_gb
    pos = req > 0
    block = {
        "counts": counts,
        "shares": shares,
        "classified": n,
        "zero_req": int((~pos).sum()),
        "mean_savings_gb": float(sav.mean()) if sav.size else 0.0,
        "sigma_savings_gb": float(sav.std()) if sav.size else 0.0,
        "underalloc_rate": shares[AllocationClass.UNDER.value],
        "remaining_potential_gb": float(np.maximum(set_gb - sf * req, 0.0).mean()) if sav.size else 0.0,
        "over_share": sum(shares[c.value] for c in OVER_CLASSES),
    }
    if mask is not None:
        block["underalloc_rate_masked"] = float(mask.mean()) if mask.size else 0.0
    return block


def evaluate_strategy(
    test: TraceDataset,
    decisions,
    *,
    safety_factor: float = 1.0,
    strategy: str | None = None,
    mode: str = "clipped",
    use_fail_count: bool = True,
) -> dict:
    """Report for one refinement strategy next to the baseline on the same records."""
    records = test.records
    if len(decisions) != len(records):
        raise CardinalityMismatch(f"{len(decisions)} decisions for {len(records)} records")
    strategy = strategy or (decisions[0].strategy if decisions else "refined")
    req = np.array([r.max_rss_gb for r in records], dtype=float)
    base = np.array([r.baseline_assigned_gb for r in records], dtype=float)
    final = np.array([d.final_gb for d in decisions], dtype=float)
    mask = np.array([r.baseline_underallocated(use_fail_count) for r in records], dtype=bool)

    refined_classes = classify_many(final, req)
    base_classes = classify_many(base, req)
    table = []
    for i, (r, d) in enumerate(zip(records, decisions)):
        table.append({
            "task_id": d.task_id,
            "time": r.time,
            "req_gb": float(req[i]),
            "baseline_gb": float(base[i]),
            "safeguarded_gb": d.safeguarded_gb,
            "set_gb": d.final_gb,
            "class": refined_classes[i],
            "baseline_class": base_classes[i],
            "savings_gb": float(base[i] - final[i]),
            "duration_s": r.duration_s,
            "baseline_masked_under": bool(mask[i]),
        })

    has_duration = any(r.duration_s is not None and r.duration_s > 0 for r in records)
    notices = []
    if has_duration:
        gbh = gbh_timeline(decisions, records)
    else:
        gbh = None
        notices.append("no duration column: GB*h analysis skipped")

    return {
        "schema": REPORT_SCHEMA,
        "mode": mode,
        "n_records": len(records),
        "safety_factor": safety_factor,
        "strategies": {
            "baseline": _strategy_block(base, req, base, safety_factor, records, mask),
            strategy: _strategy_block(final, req, base, safety_factor, records),
        },
        "refined_strategy": strategy,
        "gbh_savings_total": None if gbh is None else gbh["total_gbh"],
        "gbh_excluded_records": None if gbh is None else gbh["excluded_records"],
        "reference_internal": REFERENCE_INTERNAL,
        "notices": notices,
        "records": table,
    }


def format_table(report: dict) -> str:
    """Population shares by class, one column per strategy."""
    names = list(report["strategies"])
    width = max(len(v) for v in CLASS_LABELS.values())
    lines = [" " * width + "  " + "  ".join(f"{n:>12}" for n in names)]
    for c in CLASS_ORDER:
        vals = "  ".join(f"{100 * report['strategies'][n]['shares'][c.value]:>11.2f}%" for n in names)
        lines.append(f"{CLASS_LABELS[c]:<{width}}  {vals}")
    for key, label in (("mean_savings_gb", "Mean savings [GB]"), ("underalloc_rate", "Under-allocation rate")):
        vals = "  ".join(f"{report['strategies'][n][key]:>12.4f}" for n in names)
        lines.append(f"{label:<{width}}  {vals}")
    return "\n".join(lines)


def _write(path, name, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# buildmem-plot: {name} v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def emit_plot_data(report: dict, out_dir) -> list[str]:
    """Write one CSV per figure-style analysis; each starts with a schema comment line."""
    os.makedirs(out_dir, exist_ok=True)
    recs = report.get("records", []) if report else []
    strategies = (report or {}).get("strategies", {})
    paths = []

    def out(name):
        p = os.path.join(out_dir, f"{name}.csv")
        paths.append(p)
        return p

    # unused memory of successful baseline builds, 5% buckets
    counts = np.zeros(20, dtype=int)
    for r in recs:
        if r["baseline_masked_under"] or r["baseline_gb"] <= 0:
            continue
        pct = 100.0 * (r["baseline_gb"] - r["req_gb"]) / r["baseline_gb"]
        counts[min(max(int(pct // 5), 0), 19)] += 1
    _write(out("unused_hist"), "unused_hist", ["unused_pct_lo", "unused_pct_hi", "count"],
           [(5 * i, 5 * i + 5, int(c)) for i, c in enumerate(counts)] if recs else [])

    _write(out("class_population"), "class_population", ["class", "strategy", "share", "count"],
           [(c.value, n, s["shares"][c.value], s["counts"][c.value])
            for n, s in strategies.items() for c in CLASS_ORDER])

    _write(out("scatter_clipped"), "scatter_clipped", ["task_id", "req_gb", "set_gb", "baseline_gb"],
           [(r["task_id"], r["req_gb"], r["set_gb"], r["baseline_gb"]) for r in recs])
    _write(out("scatter_unclipped"), "scatter_unclipped", ["task_id", "req_gb", "safeguarded_gb", "baseline_gb"],
           [(r["task_id"], r["req_gb"], r["safeguarded_gb"], r["baseline_gb"]) for r in recs])

    daily = {}
    for r in recs:
        day = datetime.fromtimestamp(r["time"], tz=timezone.utc).date().isoformat()
        daily.setdefault(day, []).append(r["savings_gb"])
    _write(out("daily_savings"), "daily_savings", ["day", "n", "mean_savings_gb"],
           [(d, len(v), float(np.mean(v))) for d, v in sorted(daily.items())])

    points = []
    for r in recs:
        if r["duration_s"] and r["duration_s"] > 0:
            points.append((r["time"] + r["duration_s"], r["savings_gb"], r["savings_gb"] * r["duration_s"] / 3600.0))
    points.sort(key=lambda p: p[0])
    cum = np.cumsum([p[2] for p in points]) if points else []
    _write(out("gbh_timeline"), "gbh_timeline", ["end_time", "savings_gb", "gbh", "cumulative_gbh"],
           [(t, s, g, float(c)) for (t, s, g), c in zip(points, cum)])
    return paths


def save_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, allow_nan=True)
        fh.write("\n")
