"""Build-trace ingestion: parsing, canonical CSV, splits and baseline statistics.

A trace export is a delimiter-separated text file with one pre-aggregated
build execution per row. Column names default to the export's native names
(``buildProfile``, ``max_rss``, ...) and can be remapped with a schema dict.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateSplit, EmptyDataset, MissingColumn, ParseError

GIB = float(2**30)
SCHEMA_VERSION = "1"

# logical field -> header name in the export
DEFAULT_SCHEMA = {
    "time": "time",
    "branch": "branch",
    "build_profile": "buildProfile",
    "jobs": "jobs",
    "location": "location",
    "make_type": "makeType",
    "targets": "targets",
    "local_jobs": "localJobs",
    "component": "component",
    "max_rss_bytes": "max_rss",
    "memory_fail_count": "memory_fail_count",
    "max_memory_usage_bytes": "maxMemoryUsageBytes",
    "baseline_assigned_gb": "baseline_assigned_gb",
    "duration_s": "duration_s",
}
OPTIONAL_FIELDS = ("baseline_assigned_gb", "duration_s")

# 22 allocation sizes in GB; used when the export carries no assignment column
DEFAULT_BINS_GB = (
    4.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0, 80.0, 96.0, 112.0,
    128.0, 160.0, 192.0, 224.0, 256.0, 320.0, 384.0, 448.0, 512.0, 640.0, 768.0,
)


@dataclass(frozen=True)
class BuildRecord:
    time: float
    branch: str
    build_profile: str
    jobs: int
    location: str
    make_type: str
    targets: str
    local_jobs: int
    component: str
    max_rss_bytes: int
    memory_fail_count: int
    max_memory_usage_bytes: int
    baseline_assigned_gb: float
    duration_s: float | None = None

    @property
    def max_rss_gb(self) -> float:
        return self.max_rss_bytes / GIB

    @property
    def zero_rss(self) -> bool:
        return self.max_rss_bytes == 0

    def baseline_underallocated(self, use_fail_count: bool = True) -> bool:
        """Baseline OOM mask: kernel allocation failures OR peak above the assignment."""
        over = self.max_rss_gb > self.baseline_assigned_gb
        return over or (use_fail_count and self.memory_fail_count > 0)


@dataclass(frozen=True)
class ParseSummary:
    rows_read: int
    rows_kept: int
    rows_dropped: int
    reasons: dict
    zero_rss_rows: int = 0

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "rows_dropped": self.rows_dropped,
            "reasons": dict(sorted(self.reasons.items())),
            "zero_rss_rows": self.zero_rss_rows,
        }


@dataclass(frozen=True)
class TraceDataset:
    records: tuple
    source_files: tuple = ()
    schema_version: str = SCHEMA_VERSION
    summary: ParseSummary | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def max_rss_gb(self) -> np.ndarray:
        return np.array([r.max_rss_bytes for r in self.records], dtype=float) / GIB

    def baseline_gb(self) -> np.ndarray:
        return np.array([r.baseline_assigned_gb for r in self.records], dtype=float)

    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=float)

    def durations(self) -> np.ndarray:
        return np.array(
            [np.nan if r.duration_s is None else r.duration_s for r in self.records],
            dtype=float,
        )

    def subset(self, indices: Iterable[int]) -> "TraceDataset":
        return TraceDataset(
            tuple(self.records[i] for i in indices), self.source_files, self.schema_version
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    mode: str = "chronological"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.mode not in ("chronological", "seeded_random"):
            raise ValueError(f"unknown split mode {self.mode!r}")


def parse_timestamp(value: str) -> float:
    """Epoch seconds or ISO-8601 to UTC epoch seconds. Naive ISO times are taken as UTC."""
    s = value.strip()
    try:
        return float(s)
    except ValueError:
        pass
    if s.endswith("Z") or s.endswith("z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _parse_int(value: str) -> int:
    s = value.strip()
    try:
        return int(s)
    except ValueError:
        f = float(s)
        if not math.isfinite(f) or f != int(f):
            raise ValueError(value)
        return int(f)


def reconstruct_baseline(usage_bytes: float, bins_gb: Sequence[float]) -> float:
    """Smallest bin at or above the container memory usage (largest bin if none is)."""
    gb = usage_bytes / GIB
    for b in sorted(bins_gb):
        if b >= gb:
            return float(b)
    return float(max(bins_gb))


_INT_FIELDS = ("jobs", "local_jobs", "max_rss_bytes", "memory_fail_count", "max_memory_usage_bytes")
_STR_FIELDS = ("branch", "build_profile", "location", "make_type", "targets", "component")


def parse_trace(
    stream,
    schema: Mapping[str, str] | None = None,
    *,
    delimiter: str = ",",
    bins_gb: Sequence[float] | None = None,
    source: str = "<stream>",
) -> TraceDataset:
    """Parse one trace export into a time-sorted :class:`TraceDataset`.

    ``stream`` may be a text stream, a bytes stream, raw bytes or a string.
    Rows lacking the target or the timestamp are dropped; rows with cells that
    do not convert are skipped. Both are counted in ``dataset.summary``.
    When the schema's baseline column is absent from the header the
    assignment is rebuilt from ``bins_gb`` and ``maxMemoryUsageBytes``.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    text = _as_text(stream)
    reader = csv.reader(io.StringIO(text, newline=""), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyDataset(f"{source}: no header row") from None
    col = {name: i for i, name in enumerate(h.strip() for h in header)}

    index = {}
    for logical, name in schema.items():
        if name in col:
            index[logical] = col[name]
        elif logical == "baseline_assigned_gb" and bins_gb is not None:
            continue
        elif logical == "duration_s":
            continue
        else:
            raise MissingColumn(name)
    for logical in DEFAULT_SCHEMA:
        if logical not in schema and logical not in OPTIONAL_FIELDS:
            raise MissingColumn(DEFAULT_SCHEMA[logical])

    reasons: Counter = Counter()
    kept = []
    rows_read = 0
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        rows_read += 1
        try:
            rec = _parse_row(row, row_no, index, bins_gb)
        except _Dropped as d:
            reasons[d.reason] += 1
            continue
        except ParseError as e:
            reasons[f"parse_error:{e.field}"] += 1
            continue
        kept.append(rec)

    if not kept:
        raise EmptyDataset(f"{source}: no valid rows")
    kept.sort(key=lambda r: r.time)  # stable
    summary = ParseSummary(
        rows_read=rows_read,
        rows_kept=len(kept),
        rows_dropped=rows_read - len(kept),
        reasons=dict(reasons),
        zero_rss_rows=sum(r.zero_rss for r in kept),
    )
    return TraceDataset(tuple(kept), (source,), SCHEMA_VERSION, summary)


class _Dropped(Exception):
    def __init__(self, reason):
        self.reason = reason


def _parse_row(row, row_no, index, bins_gb) -> BuildRecord:
    def cell(logical, strip=True):
        i = index.get(logical)
        if i is None or i >= len(row):
            return ""
        return row[i].strip() if strip else row[i]

    raw_target = cell("max_rss_bytes")
    if raw_target == "":
        raise _Dropped("missing_target")
    raw_time = cell("time")
    if raw_time == "":
        raise _Dropped("missing_time")

    values = {}
    try:
        values["time"] = parse_timestamp(raw_time)
    except (ValueError, OverflowError):
        raise ParseError(row_no, "time", raw_time) from None
    for f in _INT_FIELDS:
        raw = cell(f)
        try:
            values[f] = _parse_int(raw)
        except (ValueError, OverflowError):
            raise ParseError(row_no, f, raw) from None
    for f in _STR_FIELDS:
        values[f] = cell(f, strip=False)  # verbatim, so canonical CSV round-trips

    if "baseline_assigned_gb" in index:
        raw = cell("baseline_assigned_gb")
        try:
            values["baseline_assigned_gb"] = float(raw)
        except ValueError:
            raise ParseError(row_no, "baseline_assigned_gb", raw) from None
    else:
        values["baseline_assigned_gb"] = reconstruct_baseline(
            values["max_memory_usage_bytes"], bins_gb
        )

    raw = cell("duration_s")
    if raw == "":
        values["duration_s"] = None
    else:
        try:
            values["duration_s"] = float(raw)
        except ValueError:
            raise ParseError(row_no, "duration_s", raw) from None

    if values["max_rss_bytes"] < 0:
        raise ParseError(row_no, "max_rss_bytes", values["max_rss_bytes"])
    if values["jobs"] < 1:
        raise ParseError(row_no, "jobs", values["jobs"])
    if values["local_jobs"] < 0:
        raise ParseError(row_no, "local_jobs", values["local_jobs"])
    b = values["baseline_assigned_gb"]
    if not (math.isfinite(b) and b > 0):
        raise ParseError(row_no, "baseline_assigned_gb", b)
    return BuildRecord(**values)


def _as_text(stream) -> str:
    if isinstance(stream, bytes):
        return stream.decode("utf-8-sig")
    if isinstance(stream, str):
        return stream
    data = stream.read()
    if isinstance(data, bytes):
        return data.decode("utf-8-sig")
    return data


def read_traces(paths: Sequence, schema=None, **kwargs) -> TraceDataset:
    """Parse several files and merge them into one time-sorted dataset."""
    parts = []
    for p in paths:
        with open(p, "rb") as fh:
            parts.append(parse_trace(fh, schema, source=str(p), **kwargs))
    return merge(parts)


def merge(parts: Sequence[TraceDataset]) -> TraceDataset:
    records = [r for ds in parts for r in ds.records]
    records.sort(key=lambda r: r.time)
    summaries = [ds.summary for ds in parts if ds.summary is not None]
    summary = None
    if summaries:
        reasons: Counter = Counter()
        for s in summaries:
            reasons.update(s.reasons)
        summary = ParseSummary(
            sum(s.rows_read for s in summaries),
            sum(s.rows_kept for s in summaries),
            sum(s.rows_dropped for s in summaries),
            dict(reasons),
            sum(s.zero_rss_rows for s in summaries),
        )
    sources = tuple(s for ds in parts for s in ds.source_files)
    return TraceDataset(tuple(records), sources, SCHEMA_VERSION, summary)


CANONICAL_COLUMNS = tuple(DEFAULT_SCHEMA[f.name] for f in fields(BuildRecord))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_csv(dataset: TraceDataset) -> str:
    """Canonical CSV text. ``parse_trace(to_csv(ds))`` reproduces every record exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CANONICAL_COLUMNS)
    names = [f.name for f in fields(BuildRecord)]
    for r in dataset.records:
        w.writerow([_fmt(getattr(r, n)) for n in names])
    return buf.getvalue()


def write_csv(dataset: TraceDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(to_csv(dataset))


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    if n <= 0:
        raise EmptyDataset("cannot split an empty dataset")
    n_train = math.ceil(n * spec.train_fraction - 1e-9)
    if n_train <= 0 or n_train >= n:
        raise DegenerateSplit(f"{n} records at fraction {spec.train_fraction} leave one side empty")
    if spec.mode == "chronological":
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(idx[:n_train]), np.sort(idx[n_train:])


def split(dataset: TraceDataset, spec: SplitSpec = SplitSpec()) -> tuple[TraceDataset, TraceDataset]:
    train_idx, test_idx = split_indices(len(dataset), spec)
    return dataset.subset(train_idx), dataset.subset(test_idx)


STAT_QUANTILES = (5, 10, 25, 50, 75, 90, 95)


def unused_fraction(dataset: TraceDataset) -> np.ndarray:
    base = dataset.baseline_gb()
    return (base - dataset.max_rss_gb()) / base


def baseline_stats(dataset: TraceDataset, use_fail_count: bool = True) -> dict:
    """Over-allocation statistics of the baseline assignments.

    The unused-memory distribution covers builds that did not hit the
    under-allocation mask; ``median_unused_pct_all`` includes every row.
    """
    if len(dataset) == 0:
        raise EmptyDataset("baseline_stats on empty dataset")
    unused = unused_fraction(dataset)
    mask = np.array([r.baseline_underallocated(use_fail_count) for r in dataset.records])
    ok = unused[~mask]
    dist = {}
    if ok.size:
        qs = np.percentile(ok, STAT_QUANTILES)
        dist = {f"p{q}": float(v) for q, v in zip(STAT_QUANTILES, qs)}
    return {
        "n_records": len(dataset),
        "n_successful": int(ok.size),
        "unused_fraction_distribution": dist,
        "median_unused_pct": float(np.median(ok) * 100.0) if ok.size else float("nan"),
        "median_unused_pct_all": float(np.median(unused) * 100.0),
        "underalloc_rate": float(mask.mean()),
        "bin_count": int(len(set(r.baseline_assigned_gb for r in dataset.records))),
        "zero_rss_rows": int(sum(r.zero_rss for r in dataset.records)),
    }
