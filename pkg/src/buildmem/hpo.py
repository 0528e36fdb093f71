"""Joint hyperparameter search for the two ensemble submodels.

Trials are scored with ``c * under_allocations + sum(pred) / sum(actual)`` on
a chronological inner validation split, without any safety factor.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gbqr
from .errors import AllZeroActuals, LengthMismatch
from .predictor import DEFAULT_PARAMS_A, DEFAULT_PARAMS_B

DEFAULT_C = 3.0


@dataclass(frozen=True)
class CostResult:
    cost: float
    underalloc_count: float
    alloc_ratio: float
    zero_actual_rows: int = 0


def cost(predictions, actuals, c: float = DEFAULT_C, deficit: bool = False) -> CostResult:
    """Trial cost. Rows with a zero actual are excluded and counted.

    ``deficit=True`` sums the under-allocated GB instead of counting rows.
    """
    pred = np.asarray(predictions, dtype=float)
    act = np.asarray(actuals, dtype=float)
    if pred.shape != act.shape:
        raise LengthMismatch(f"{pred.shape} predictions vs {act.shape} actuals")
    keep = act > 0
    if not keep.any():
        raise AllZeroActuals("no row with a positive actual peak")
    pred, act_k = pred[keep], act[keep]
    if deficit:
        under = float(np.maximum(act_k - pred, 0.0).sum())
    else:
        under = int((pred < act_k).sum())
    ratio = float(pred.sum() / act_k.sum())
    return CostResult(c * under + ratio, under, ratio, int((~keep).sum()))


# (kind, low, high) for numeric kinds; ("categorical", levels) otherwise
DEFAULT_SPACE_A = {
    "n_trees": ("int", 50, 500),
    "learning_rate": ("log-real", 0.01, 0.3),
    "max_leaves": ("int", 8, 128),
    "min_samples_leaf": ("int", 5, 100),
    "subsample": ("real", 0.6, 1.0),
    "colsample": ("real", 0.6, 1.0),
    "l2_leaf_reg": ("real", 0.0, 10.0),
}
DEFAULT_SPACE_B = {
    "n_trees": ("int", 50, 500),
    "learning_rate": ("log-real", 0.01, 0.3),
    "max_depth": ("int", 3, 10),
    "min_samples_leaf": ("int", 5, 100),
    "subsample": ("real", 0.6, 1.0),
    "colsample": ("real", 0.6, 1.0),
    "l2_leaf_reg": ("real", 0.0, 10.0),
}


@dataclass
class SearchSpace:
    space_a: dict = field(default_factory=lambda: dict(DEFAULT_SPACE_A))
    space_b: dict = field(default_factory=lambda: dict(DEFAULT_SPACE_B))
    n_trials: int = 20
    seed: int = 0
    sampler: str = "random"
    base_a: gbqr.GbqrParams = DEFAULT_PARAMS_A
    base_b: gbqr.GbqrParams = DEFAULT_PARAMS_B

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.sampler not in ("random", "tpe_lite"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        for space in (self.space_a, self.space_b):
            for name, spec in space.items():
                if name in ("growth", "quantile_alpha"):
                    raise ValueError(f"{name} is fixed per submodel and cannot be searched")
                _check_dim(name, spec)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        kw = {}
        if "space_a" in d:
            kw["space_a"] = {k: tuple(v) for k, v in d["space_a"].items()}
        if "space_b" in d:
            kw["space_b"] = {k: tuple(v) for k, v in d["space_b"].items()}
        for k in ("n_trials", "seed", "sampler"):
            if k in d:
                kw[k] = d[k]
        if "base_a" in d:
            kw["base_a"] = replace(DEFAULT_PARAMS_A, **d["base_a"])
        if "base_b" in d:
            kw["base_b"] = replace(DEFAULT_PARAMS_B, **d["base_b"])
        return cls(**kw)

    def dims(self):
        return [("a", k, v) for k, v in sorted(self.space_a.items())] + [
            ("b", k, v) for k, v in sorted(self.space_b.items())
        ]


def _check_dim(name, spec):
    kind = spec[0]
    if kind == "categorical":
        if not spec[1]:
            raise ValueError(f"{name}: empty level list")
        return
    if kind not in ("int", "real", "log-real"):
        raise ValueError(f"{name}: unknown kind {kind!r}")
    lo, hi = spec[1], spec[2]
    if not lo <= hi:
        raise ValueError(f"{name}: bounds out of order")
    if kind == "log-real" and lo <= 0:
        raise ValueError(f"{name}: log-real bounds must be positive")


def _from_unit(spec, u):
    kind = spec[0]
    if kind == "categorical":
        levels = spec[1]
        return levels[min(int(u * len(levels)), len(levels) - 1)]
    lo, hi = spec[1], spec[2]
    if kind == "int":
        return int(min(lo + math.floor(u * (hi - lo + 1)), hi))
    if kind == "real":
        return float(lo + u * (hi - lo))
    return float(math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo))))


@dataclass
class TrialResult:
    trial_id: int
    params_a: dict
    params_b: dict
    cost: float
    underalloc_count: float
    alloc_ratio: float
    c: float
    wall_time: float = 0.0
    status: str = "ok"
    zero_actual_rows: int = 0
    unit: list = field(default_factory=list, repr=False)
    error: str | None = None

    def log_record(self) -> dict:
        # wall_time is excluded so logs are byte-identical across reruns
        d = asdict(self)
        d.pop("wall_time")
        d.pop("unit")
        return d


def _sample_unit(space: SearchSpace, trial_id: int, history: list) -> list[float]:
    rng = np.random.default_rng(np.random.SeedSequence([space.seed, trial_id]))
    n_dims = len(space.dims())
    n_startup = max(5, space.n_trials // 4)
    ok = [t for t in history if t.status == "ok"]
    if space.sampler == "random" or len(ok) < n_startup:
        return rng.uniform(size=n_dims).tolist()
    # tpe_lite: Parzen densities over the unit cube for the best quarter (l)
    # and the rest (g); pick the candidate maximizing l/g
    ranked = sorted(ok, key=lambda t: (t.cost, t.underalloc_count, t.trial_id))
    n_good = max(1, math.ceil(0.25 * len(ranked)))
    good = np.array([t.unit for t in ranked[:n_good]])
    bad = np.array([t.unit for t in ranked[n_good:]]) if len(ranked) > n_good else rng.uniform(size=(1, n_dims))
    bw = max(0.05, 0.3 * len(ranked) ** (-1 / 5))
    picks = good[rng.integers(0, len(good), size=24)]
    cand = np.clip(picks + rng.normal(0, bw, size=picks.shape), 0.0, 1.0)

    def log_density(points, pts):
        d = (points[:, None, :] - pts[None, :, :]) / bw
        k = np.exp(-0.5 * d**2) / (bw * math.sqrt(2 * math.pi))
        return np.log(k.mean(axis=1) + 0.1).sum(axis=1)  # +0.1: uniform prior mass

    score = log_density(cand, good) - log_density(cand, bad)
    return cand[int(np.argmax(score))].tolist()


def _params_from_unit(space: SearchSpace, unit, trial_id):
    a, b = {}, {}
    for u, (which, name, spec) in zip(unit, space.dims()):
        (a if which == "a" else b)[name] = _from_unit(spec, u)
    seeds = np.random.SeedSequence([space.seed, trial_id, 1]).generate_state(2)
    pa = replace(space.base_a, **a, seed=int(seeds[0]))
    pb = replace(space.base_b, **b, seed=int(seeds[1]))
    return pa, pb


def inner_split(n: int, validation_fraction: float = 0.2):
    """Chronological split: last ``validation_fraction`` of rows validate."""
    n_val = max(1, int(round(n * validation_fraction)))
    if n_val >= n:
        raise ValueError("inner split leaves no training rows")
    return np.arange(n - n_val), np.arange(n - n_val, n)


def run_trial(train, val, space, trial_id, unit, c, deficit=False) -> TrialResult:
    t0 = time.perf_counter()
    pa = pb = None
    try:
        pa, pb = _params_from_unit(space, unit, trial_id)
        a = gbqr.fit(train, pa)
        b = gbqr.fit(train, pb)
        pred = np.maximum(gbqr.predict(a, val.values), gbqr.predict(b, val.values))
        res = cost(pred, val.target, c, deficit)
        return TrialResult(
            trial_id, asdict(pa), asdict(pb), res.cost, res.underalloc_count, res.alloc_ratio, c,
            time.perf_counter() - t0, "ok", res.zero_actual_rows, list(unit),
        )
    except Exception as e:  # a failing trial must not abort the search
        return TrialResult(
            trial_id, asdict(pa) if pa else {}, asdict(pb) if pb else {}, math.inf, 0, math.inf, c,
            time.perf_counter() - t0, "failed", 0, list(unit), f"{type(e).__name__}: {e}",
        )


def search(train, space: SearchSpace, c: float = DEFAULT_C, validation_fraction: float = 0.2,
           log_path=None, deficit: bool = False):
    """Run ``space.n_trials`` trials; return ``(best, trials)``.

    ``train`` is a chronologically ordered FeatureMatrix. Best is the minimum
    cost, ties broken by fewer under-allocations and then the lower trial id.
    """
    tr_idx, val_idx = inner_split(train.values.shape[0], validation_fraction)
    inner_train, inner_val = train.take(tr_idx), train.take(val_idx)
    trials: list[TrialResult] = []
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for trial_id in range(space.n_trials):
            unit = _sample_unit(space, trial_id, trials)
            result = run_trial(inner_train, inner_val, space, trial_id, unit, c, deficit)
            trials.append(result)
            if log:
                log.write(json.dumps(result.log_record(), separators=(",", ":")) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    best = min(trials, key=lambda t: (t.cost, t.underalloc_count, t.trial_id))
    return best, trials


def best_params_artifact(best: TrialResult) -> dict:
    return {
        "trial_id": best.trial_id,
        "cost": best.cost,
        "underalloc_count": best.underalloc_count,
        "alloc_ratio": best.alloc_ratio,
        "c": best.c,
        "params_a": best.params_a,
        "params_b": best.params_b,
    }


def params_from_artifact(d: dict) -> tuple[gbqr.GbqrParams, gbqr.GbqrParams]:
    return gbqr.GbqrParams.from_dict(d["params_a"]), gbqr.GbqrParams.from_dict(d["params_b"])


def read_trial_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
