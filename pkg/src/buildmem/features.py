"""Feature engineering and one-hot encoding for build records.

Two feature sets exist: ``ensemble_table1`` (engineered temporal, profile,
target and history features for the boosted ensemble) and
``classifier_table1`` (raw export fields for the linear threshold model).
"""
from __future__ import annotations

import json
import math
import re
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyInput, NotFitted
from .trace import GIB, TraceDataset

UNKNOWN = "unknown"

DEFAULT_PROFILE_RULES = (
    {"field": "bp_arch", "pattern": r"(x86_64|ppc64le|ppc64|aarch64|arm64|s390x)", "value": None},
    {"field": "bp_compiler", "pattern": r"(gcc\d*|clang\d*|icc\d*|icx\d*|msvc\d*)", "value": None},
    {"field": "bp_opt", "pattern": r"(?:^|[-_.])(opt|rel|release|dbg|debug|cov|asan|tsan)(?:$|[-_.])", "value": None},
)
DEFAULT_GROUP_KEY = ("branch", "component", "bp_arch", "bp_opt")
DEFAULT_WINDOW = 5

ENSEMBLE_CATEGORICAL = (
    "branch", "location", "make_type", "component", "bp_arch", "bp_compiler", "bp_opt",
)
ENSEMBLE_NUMERIC = (
    "jobs", "local_jobs", "ts_year", "ts_month", "ts_dow", "ts_hour", "ts_weekofyear",
    "target_cnt", "target_has_dist", "lag_1_grouped", "lag_max_rss_global_w5",
    "rolling_p95_rss_g1_w5",
)
CLASSIFIER_CATEGORICAL = ("branch", "build_profile", "location", "make_type", "targets", "component")
CLASSIFIER_NUMERIC = ("jobs", "local_jobs")

FEATURE_SETS = {
    "ensemble_table1": (ENSEMBLE_CATEGORICAL, ENSEMBLE_NUMERIC),
    "classifier_table1": (CLASSIFIER_CATEGORICAL, CLASSIFIER_NUMERIC),
}
HISTORY_FEATURES = ("lag_1_grouped", "lag_max_rss_global_w5", "rolling_p95_rss_g1_w5")


@dataclass(frozen=True)
class EngineeredRow:
    branch: str
    build_profile: str
    jobs: int
    location: str
    make_type: str
    targets: str
    local_jobs: int
    component: str
    bp_arch: str
    bp_compiler: str
    bp_opt: str
    ts_year: int
    ts_month: int
    ts_dow: int
    ts_hour: int
    ts_weekofyear: int
    target_cnt: int
    target_has_dist: bool
    lag_1_grouped: float | None
    lag_max_rss_global_w5: float | None
    rolling_p95_rss_g1_w5: float | None
    max_rss_gb: float | None = None
    time: float | None = None

    def value(self, name):
        v = getattr(self, name)
        return float(v) if isinstance(v, bool) else v


def decompose_build_profile(build_profile: str, rules: Sequence[Mapping] = DEFAULT_PROFILE_RULES):
    """Split a build profile into (arch, compiler, optimization level).

    ``rules`` is an ordered list of ``{field, pattern, value}``; the first rule
    matching for a field wins. A ``value`` of ``None`` takes the matched text
    (first capture group if present).
    """
    out = {"bp_arch": UNKNOWN, "bp_compiler": UNKNOWN, "bp_opt": UNKNOWN}
    done = set()
    for rule in rules:
        f = rule["field"]
        if f in done:
            continue
        m = re.search(rule["pattern"], build_profile or "")
        if m is None:
            continue
        value = rule.get("value")
        if value is None:
            value = m.group(1) if m.groups() else m.group(0)
        out[f] = value
        done.add(f)
    return out["bp_arch"], out["bp_compiler"], out["bp_opt"]


def load_profile_rules(path) -> list:
    with open(path, encoding="utf-8") as fh:
        rules = json.load(fh)
    for r in rules:
        if not {"field", "pattern"} <= set(r):
            raise ValueError(f"bad decomposition rule: {r!r}")
    return rules


def temporal_features(ts: float) -> tuple[int, int, int, int, int]:
    """(year, month, day-of-week with Monday=0, hour, ISO week) of a UTC epoch timestamp."""
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    return dt.year, dt.month, dt.weekday(), dt.hour, dt.isocalendar()[1]


def target_tokens(targets: str) -> list[str]:
    return [t.strip() for t in (targets or "").split(",") if t.strip()]


def quantile_linear(values: Sequence[float], q: float) -> float:
    """Sorted-linear-interpolation quantile (numpy's default "linear" method)."""
    return float(np.quantile(np.asarray(values, dtype=float), q))


def rolling_features(
    keys: Sequence[tuple],
    target_gb: Sequence[float],
    window: int = DEFAULT_WINDOW,
) -> list[tuple]:
    """History features per position, from strictly earlier positions only.

    Returns ``(lag_1_grouped, lag_max_rss_global_w5, rolling_p95_rss_g1_w5)``
    tuples; ``None`` where no earlier record exists.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    global_win: deque = deque(maxlen=window)
    group_win: dict = defaultdict(lambda: deque(maxlen=window))
    out = []
    for key, y in zip(keys, target_gb):
        g = group_win[key]
        lag1 = g[-1] if g else None
        glob = float(np.mean(global_win)) if global_win else None
        p95 = quantile_linear(g, 0.95) if g else None
        out.append((lag1, glob, p95))
        global_win.append(float(y))
        g.append(float(y))
    return out


def engineer(
    dataset: TraceDataset,
    history: TraceDataset | None = None,
    *,
    rules: Sequence[Mapping] = DEFAULT_PROFILE_RULES,
    group_key: Sequence[str] = DEFAULT_GROUP_KEY,
    window: int = DEFAULT_WINDOW,
) -> list[EngineeredRow]:
    """Engineer one row per record of ``dataset``.

    ``history`` holds earlier observed builds (typically the training split when
    engineering the test split); its records feed the lag and rolling windows
    but produce no rows. Records are interleaved by time, history first on ties.
    """
    tagged = [(r.time, 0, i, r) for i, r in enumerate(history.records)] if history else []
    tagged += [(r.time, 1, i, r) for i, r in enumerate(dataset.records)]
    tagged.sort(key=lambda t: (t[0], t[1], t[2]))

    base = []
    keys = []
    for _, _, _, rec in tagged:
        arch, comp, opt = decompose_build_profile(rec.build_profile, rules)
        partial = {
            "branch": rec.branch, "component": rec.component, "location": rec.location,
            "make_type": rec.make_type, "build_profile": rec.build_profile,
            "bp_arch": arch, "bp_compiler": comp, "bp_opt": opt,
        }
        base.append(partial)
        keys.append(tuple(partial[k] for k in group_key))
    hist = rolling_features(keys, [t[3].max_rss_bytes / GIB for t in tagged], window)

    rows: list = [None] * len(dataset)
    for (ts, side, i, rec), partial, h in zip(tagged, base, hist):
        if side == 0:
            continue
        rows[i] = _make_row(rec, partial, h)
    return rows


def _make_row(rec, partial, hist) -> EngineeredRow:
    year, month, dow, hour, week = temporal_features(rec.time)
    tokens = target_tokens(rec.targets)
    return EngineeredRow(
        branch=rec.branch,
        build_profile=rec.build_profile,
        jobs=rec.jobs,
        location=rec.location,
        make_type=rec.make_type,
        targets=rec.targets,
        local_jobs=rec.local_jobs,
        component=rec.component,
        bp_arch=partial["bp_arch"],
        bp_compiler=partial["bp_compiler"],
        bp_opt=partial["bp_opt"],
        ts_year=year,
        ts_month=month,
        ts_dow=dow,
        ts_hour=hour,
        ts_weekofyear=week,
        target_cnt=len(tokens),
        target_has_dist="dist" in tokens,
        lag_1_grouped=hist[0],
        lag_max_rss_global_w5=hist[1],
        rolling_p95_rss_g1_w5=hist[2],
        max_rss_gb=rec.max_rss_bytes / GIB,
        time=rec.time,
    )


# attribute keys used by scheduler requests -> record fields
ATTRIBUTE_KEYS = {
    "branch": "branch",
    "buildProfile": "build_profile",
    "jobs": "jobs",
    "location": "location",
    "makeType": "make_type",
    "targets": "targets",
    "localJobs": "local_jobs",
    "component": "component",
    "time": "time",
}


def row_from_attributes(attrs: Mapping[str, str], rules=DEFAULT_PROFILE_RULES) -> EngineeredRow:
    """Build a row from a request attribute map.

    Missing categorical attributes become ``"unknown"`` (an unseen level), missing
    numerics stay missing and take the encoder's fill. History features may be
    supplied under their feature names; otherwise they are missing.
    """
    from .trace import parse_timestamp

    def num(key, cast=int):
        raw = attrs.get(key)
        if raw is None or str(raw).strip() == "":
            return None
        return cast(float(raw)) if cast is int else cast(raw)

    profile = attrs.get("buildProfile", "")
    arch, comp, opt = decompose_build_profile(profile, rules)
    t = attrs.get("time")
    ts = parse_timestamp(str(t)) if t not in (None, "") else None
    if ts is not None:
        year, month, dow, hour, week = temporal_features(ts)
    else:
        year = month = dow = hour = week = None
    tokens = target_tokens(attrs.get("targets", ""))
    return EngineeredRow(
        branch=attrs.get("branch", UNKNOWN),
        build_profile=attrs.get("buildProfile", UNKNOWN),
        jobs=num("jobs"),
        location=attrs.get("location", UNKNOWN),
        make_type=attrs.get("makeType", UNKNOWN),
        targets=attrs.get("targets", UNKNOWN),
        local_jobs=num("localJobs"),
        component=attrs.get("component", UNKNOWN),
        bp_arch=arch,
        bp_compiler=comp,
        bp_opt=opt,
        ts_year=year,
        ts_month=month,
        ts_dow=dow,
        ts_hour=hour,
        ts_weekofyear=week,
        target_cnt=len(tokens) if "targets" in attrs else None,
        target_has_dist=("dist" in tokens) if "targets" in attrs else None,
        lag_1_grouped=num("lag_1_grouped", float),
        lag_max_rss_global_w5=num("lag_max_rss_global_w5", float),
        rolling_p95_rss_g1_w5=num("rolling_p95_rss_g1_w5", float),
        time=ts,
    )


def attributes_from_row(row: EngineeredRow) -> dict:
    """Inverse of :func:`row_from_attributes` for rows built by :func:`engineer`."""
    attrs = {}
    for key, name in ATTRIBUTE_KEYS.items():
        v = getattr(row, name)
        if v is not None:
            attrs[key] = repr(v) if isinstance(v, float) else str(v)
    for name in HISTORY_FEATURES:
        v = getattr(row, name)
        if v is not None:
            attrs[name] = repr(float(v))
    return attrs


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: str  # "numeric" | "one_hot"
    source_feature: str
    level: str | None = None


@dataclass
class FeatureMatrix:
    values: np.ndarray
    column_meta: list
    target: np.ndarray | None = None
    row_ids: np.ndarray | None = None

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.column_meta]

    @property
    def shape(self):
        return self.values.shape

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            self.values[rows],
            self.column_meta,
            None if self.target is None else self.target[rows],
            None if self.row_ids is None else self.row_ids[rows],
        )


@dataclass
class EncoderState:
    feature_set: str
    categorical: dict = field(default_factory=dict)  # feature -> ordered levels
    numeric: dict = field(default_factory=dict)  # feature -> fill constant
    fitted: bool = False

    def columns(self) -> list[ColumnMeta]:
        cols = []
        cat_names, num_names = FEATURE_SETS[self.feature_set]
        for f in cat_names:
            for level in self.categorical[f]:
                cols.append(ColumnMeta(f"{f}={level}", "one_hot", f, level))
        for f in num_names:
            cols.append(ColumnMeta(f, "numeric", f))
        return cols

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EncoderState":
        if d["feature_set"] not in FEATURE_SETS:
            raise ValueError(f"unknown feature set {d['feature_set']!r}")
        return cls(d["feature_set"], dict(d["categorical"]), dict(d["numeric"]), bool(d["fitted"]))


def fit_encoder(rows: Sequence[EngineeredRow], feature_set: str = "ensemble_table1") -> EncoderState:
    """Freeze categorical vocabularies and numeric median fills from training rows."""
    if not rows:
        raise EmptyInput("fit_encoder needs at least one row")
    cat_names, num_names = FEATURE_SETS[feature_set]
    categorical = {f: sorted({str(r.value(f)) for r in rows}) for f in cat_names}
    numeric = {}
    for f in num_names:
        vals = [r.value(f) for r in rows if r.value(f) is not None]
        numeric[f] = float(np.median(vals)) if vals else 0.0
    return EncoderState(feature_set, categorical, numeric, True)


def transform(rows: Sequence[EngineeredRow], encoder: EncoderState, with_target: bool = True) -> FeatureMatrix:
    if not encoder.fitted:
        raise NotFitted("encoder is not fitted")
    cat_names, num_names = FEATURE_SETS[encoder.feature_set]
    cols = encoder.columns()
    X = np.zeros((len(rows), len(cols)), dtype=float)
    offset = 0
    for f in cat_names:
        lookup = {lvl: j for j, lvl in enumerate(encoder.categorical[f])}
        for i, r in enumerate(rows):
            j = lookup.get(str(r.value(f)))
            if j is not None:
                X[i, offset + j] = 1.0
        offset += len(lookup)
    for f in num_names:
        fill = encoder.numeric[f]
        for i, r in enumerate(rows):
            v = r.value(f)
            X[i, offset] = fill if v is None or (isinstance(v, float) and math.isnan(v)) else v
        offset += 1
    target = None
    if with_target and rows and all(r.max_rss_gb is not None for r in rows):
        target = np.array([r.max_rss_gb for r in rows], dtype=float)
    return FeatureMatrix(X, cols, target, np.arange(len(rows)))


def featurize(
    dataset: TraceDataset,
    feature_set: str = "ensemble_table1",
    encoder: EncoderState | None = None,
    history: TraceDataset | None = None,
    **engineer_kwargs,
) -> tuple[FeatureMatrix, EncoderState, list[EngineeredRow]]:
    """Engineer, fit (when no encoder is given) and transform in one call."""
    rows = engineer(dataset, history, **engineer_kwargs)
    if encoder is None:
        encoder = fit_encoder(rows, feature_set)
    return transform(rows, encoder), encoder, rows
