"""Deployable memory predictors and the refinement policy.

Two strategies turn a build's features into a refined memory requirement:

* :class:`ThresholdClassifier` - linear hinge-loss model deciding whether the
  build peaks below a fixed threshold; if so the requirement becomes
  ``min(threshold * safety_factor, original)``.
* :class:`QuantileEnsemble` - two boosted quantile models (leaf-wise and
  level-wise growth) whose elementwise maximum, times a safety factor and
  floored at 1 GB, is clipped at the original requirement.

Both serialize to self-describing JSON envelopes that carry the encoder and
feature configuration, so offline evaluation and the service share one code path.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import gbqr
from .errors import ArtifactInvalid, NotFitted, SingleClass
from .features import (
    DEFAULT_GROUP_KEY,
    DEFAULT_PROFILE_RULES,
    DEFAULT_WINDOW,
    EncoderState,
    EngineeredRow,
    FeatureMatrix,
    attributes_from_row,
    row_from_attributes,
    transform,
)

ENSEMBLE_FORMAT = "buildmem.ensemble"
CLASSIFIER_FORMAT = "buildmem.classifier"
ENVELOPE_VERSION = 1

DEFAULT_THRESHOLD_GB = 50.0
CLASSIFIER_SAFETY = 2.0
ENSEMBLE_SAFETY = 1.2
FLOOR_GB = 1.0

DEFAULT_PARAMS_A = gbqr.GbqrParams(
    n_trees=100, learning_rate=0.1, growth="leaf_wise", max_leaves=31, max_depth=12,
    min_samples_leaf=100, subsample=0.8, colsample=0.8, seed=0,
)
DEFAULT_PARAMS_B = gbqr.GbqrParams(
    n_trees=100, learning_rate=0.1, growth="level_wise", max_depth=6,
    min_samples_leaf=100, subsample=0.8, colsample=0.8, seed=1,
)


@dataclass(frozen=True)
class RefinementDecision:
    task_id: str
    original_gb: float
    raw_prediction_gb: float
    safeguarded_gb: float
    final_gb: float
    clipped: bool
    strategy: str  # classifier | ensemble | passthrough
    model_version: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "RefinementDecision":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def passthrough(task_id: str, original_gb: float, model_version: str = "") -> RefinementDecision:
    return RefinementDecision(
        task_id, original_gb, original_gb, original_gb, original_gb, False, "passthrough", model_version
    )


def apply_policy(raw, original, safety_factor, floor_gb=FLOOR_GB, clip=True):
    """Safeguard, floor and clip predictions. Vectorized.

    Returns ``(safeguarded, final, clipped)`` where ``safeguarded = raw *
    safety_factor`` and ``final = min(max(safeguarded, floor_gb), original)``.
    With ``clip=False`` the final value is not capped (analysis only).
    """
    raw = np.asarray(raw, dtype=float)
    original = np.asarray(original, dtype=float)
    safeguarded = raw * safety_factor
    floored = np.maximum(safeguarded, floor_gb)
    clipped = floored > original
    final = np.minimum(floored, original) if clip else floored
    return safeguarded, final, clipped


def snap_to_bins(final_gb: float, bins: Sequence[float]) -> tuple[float, bool]:
    """Smallest bin >= final_gb; the largest bin plus an overflow flag if none is."""
    if not bins:
        raise ValueError("bin table is empty")
    for b in bins:
        if b >= final_gb:
            return float(b), False
    return float(bins[-1]), True


def _version(prefix: str, payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return f"{prefix}-{hashlib.sha256(blob).hexdigest()[:12]}"


def default_feature_config() -> dict:
    return {
        "rules": [dict(r) for r in DEFAULT_PROFILE_RULES],
        "group_key": list(DEFAULT_GROUP_KEY),
        "window": DEFAULT_WINDOW,
    }


class _Predictor:
    encoder: EncoderState
    feature_config: dict
    version: str
    strategy: str

    def row_from_attributes(self, attrs: Mapping[str, str]) -> EngineeredRow:
        return row_from_attributes(attrs, self.feature_config["rules"])

    def encode(self, rows: Sequence[EngineeredRow]) -> FeatureMatrix:
        return transform(rows, self.encoder, with_target=False)

    def refine_attributes(self, attrs, original_gb, task_id="") -> RefinementDecision:
        return self.refine_rows([self.row_from_attributes(attrs)], [original_gb], [task_id])[0]

    def self_check(self) -> None:
        """Re-predict the embedded smoke row; raise ArtifactInvalid on mismatch."""
        smoke = self.smoke
        if not smoke:
            raise ArtifactInvalid("artifact carries no smoke row")
        got = self._smoke_value(self.row_from_attributes(smoke["attributes"]))
        want = smoke["expected"]
        if isinstance(want, bool) or isinstance(got, bool):
            ok = bool(got) == bool(want)
        else:
            ok = math.isfinite(got) and math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-9)
        if not ok:
            raise ArtifactInvalid(f"smoke prediction {got!r} != recorded {want!r}")


@dataclass
class ThresholdClassifier(_Predictor):
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    encoder: EncoderState
    threshold_gb: float = DEFAULT_THRESHOLD_GB
    safety_factor: float = CLASSIFIER_SAFETY
    feature_config: dict = field(default_factory=default_feature_config)
    training_meta: dict = field(default_factory=dict)
    smoke: dict = field(default_factory=dict)
    version: str = ""
    strategy = "classifier"

    def score(self, X: np.ndarray) -> np.ndarray:
        z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        return (z * self.weights).sum(axis=1) + self.bias

    def predict_below(self, X) -> np.ndarray:
        """True where the build is predicted to peak below the threshold (score <= 0)."""
        if self.weights is None:
            raise NotFitted("classifier is not trained")
        X = X.values if hasattr(X, "values") else X
        return self.score(X) <= 0.0

    def refine_rows(self, rows, originals, task_ids) -> list[RefinementDecision]:
        below = self.predict_below(self.encode(rows))
        return self.decisions(below, originals, task_ids)

    def decisions(self, below, originals, task_ids) -> list[RefinementDecision]:
        capped = self.threshold_gb * self.safety_factor
        out = []
        for b, orig, tid in zip(below, originals, task_ids):
            orig = float(orig)
            if b:
                out.append(RefinementDecision(
                    tid, orig, self.threshold_gb, capped, min(capped, orig), capped > orig,
                    "classifier", self.version,
                ))
            else:
                out.append(RefinementDecision(tid, orig, orig, orig, orig, False, "classifier", self.version))
        return out

    def _smoke_value(self, row):
        return bool(self.predict_below(self.encode([row]))[0])

    def _payload(self) -> dict:
        return {
            "format": CLASSIFIER_FORMAT,
            "format_version": ENVELOPE_VERSION,
            "threshold_gb": self.threshold_gb,
            "safety_factor": self.safety_factor,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "encoder": self.encoder.to_dict(),
            "feature_config": self.feature_config,
            "training_meta": self.training_meta,
            "smoke": self.smoke,
        }

    def to_dict(self) -> dict:
        d = self._payload()
        d["version"] = self.version
        return d

    @classmethod
    def from_dict(cls, d) -> "ThresholdClassifier":
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            bias=float(d["bias"]),
            mean=np.asarray(d["mean"], dtype=float),
            scale=np.asarray(d["scale"], dtype=float),
            encoder=EncoderState.from_dict(d["encoder"]),
            threshold_gb=float(d["threshold_gb"]),
            safety_factor=float(d["safety_factor"]),
            feature_config=d["feature_config"],
            training_meta=d.get("training_meta", {}),
            smoke=d.get("smoke", {}),
            version=d["version"],
        )


def train_classifier(
    train: FeatureMatrix,
    encoder: EncoderState,
    threshold_gb: float = DEFAULT_THRESHOLD_GB,
    hinge_epochs: int = 20,
    seed: int = 0,
    *,
    l2: float = 1e-4,
    eta0: float = 0.1,
    safety_factor: float = CLASSIFIER_SAFETY,
    feature_config: dict | None = None,
    training_meta: dict | None = None,
    smoke_row: EngineeredRow | None = None,
) -> ThresholdClassifier:
    """Hinge-loss linear model by seeded stochastic subgradient descent.

    Columns are standardized with training mean/std. Label convention: builds
    peaking below the threshold get -1, so a non-positive score means "below".
    """
    if train.target is None:
        raise ValueError("training matrix needs a target")
    X = train.values
    below = train.target < threshold_gb
    if below.all() or (~below).all():
        raise SingleClass("all training builds fall on one side of the threshold")
    y = np.where(below, -1.0, 1.0)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale

    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    t = 0
    for _ in range(hinge_epochs):
        for i in rng.permutation(X.shape[0]):
            eta = eta0 / (1.0 + eta0 * l2 * t)
            margin = y[i] * (Z[i] @ w + b)
            w *= 1.0 - eta * l2
            if margin < 1.0:
                w += eta * y[i] * Z[i]
                b += eta * y[i]
            t += 1

    clf = ThresholdClassifier(
        weights=w, bias=float(b), mean=mean, scale=scale, encoder=encoder,
        threshold_gb=threshold_gb, safety_factor=safety_factor,
        feature_config=feature_config or default_feature_config(),
    )
    pred_below = clf.predict_below(X)
    n_above = int((~below).sum())
    meta = {
        "train_rows": int(X.shape[0]),
        "train_accuracy": float((pred_below == below).mean()),
        # false positive: predicted below, actually above
        "false_positive_rate": float((pred_below & ~below).sum() / n_above),
        "reference_accepted_fpr": 0.10,
        "hinge_epochs": hinge_epochs,
        "l2": l2,
        "seed": seed,
    }
    meta.update(training_meta or {})
    clf.training_meta = meta
    if smoke_row is not None:
        clf.smoke = {"attributes": attributes_from_row(smoke_row), "expected": None}
        clf.smoke["expected"] = clf._smoke_value(clf.row_from_attributes(clf.smoke["attributes"]))
    clf.version = _version("clf", clf._payload())
    return clf


@dataclass
class QuantileEnsemble(_Predictor):
    submodel_a: gbqr.GbqrModel
    submodel_b: gbqr.GbqrModel
    encoder: EncoderState
    alpha: float = 0.95
    safety_factor: float = ENSEMBLE_SAFETY
    floor_gb: float = FLOOR_GB
    feature_config: dict = field(default_factory=default_feature_config)
    training_meta: dict = field(default_factory=dict)
    smoke: dict = field(default_factory=dict)
    version: str = ""
    strategy = "ensemble"

    def predict_raw(self, X) -> np.ndarray:
        """Elementwise maximum of the two submodels, in GB."""
        if self.submodel_a is None or self.submodel_b is None:
            raise NotFitted("ensemble is not trained")
        return np.maximum(gbqr.predict(self.submodel_a, X), gbqr.predict(self.submodel_b, X))

    def refine_rows(self, rows, originals, task_ids, clip=True) -> list[RefinementDecision]:
        return self.decisions(self.predict_raw(self.encode(rows)), originals, task_ids, clip)

    def decisions(self, raw, originals, task_ids, clip=True) -> list[RefinementDecision]:
        safe, final, clipped = apply_policy(raw, originals, self.safety_factor, self.floor_gb, clip)
        return [
            RefinementDecision(tid, float(o), float(r), float(s), float(f), bool(c), "ensemble", self.version)
            for tid, o, r, s, f, c in zip(task_ids, originals, raw, safe, final, clipped)
        ]

    def _smoke_value(self, row):
        return float(self.predict_raw(self.encode([row]))[0])

    def _payload(self) -> dict:
        return {
            "format": ENSEMBLE_FORMAT,
            "format_version": ENVELOPE_VERSION,
            "alpha": self.alpha,
            "safety_factor": self.safety_factor,
            "floor_gb": self.floor_gb,
            "encoder": self.encoder.to_dict(),
            "feature_config": self.feature_config,
            "submodel_a": self.submodel_a.to_dict(),
            "submodel_b": self.submodel_b.to_dict(),
            "training_meta": self.training_meta,
            "smoke": self.smoke,
        }

    def to_dict(self) -> dict:
        d = self._payload()
        d["version"] = self.version
        return d

    @classmethod
    def from_dict(cls, d) -> "QuantileEnsemble":
        return cls(
            submodel_a=gbqr.GbqrModel.from_dict(d["submodel_a"]),
            submodel_b=gbqr.GbqrModel.from_dict(d["submodel_b"]),
            encoder=EncoderState.from_dict(d["encoder"]),
            alpha=float(d["alpha"]),
            safety_factor=float(d["safety_factor"]),
            floor_gb=float(d.get("floor_gb", FLOOR_GB)),
            feature_config=d["feature_config"],
            training_meta=d.get("training_meta", {}),
            smoke=d.get("smoke", {}),
            version=d["version"],
        )


def train_ensemble(
    train: FeatureMatrix,
    params_a: gbqr.GbqrParams = DEFAULT_PARAMS_A,
    params_b: gbqr.GbqrParams = DEFAULT_PARAMS_B,
    encoder: EncoderState | None = None,
    *,
    safety_factor: float = ENSEMBLE_SAFETY,
    feature_config: dict | None = None,
    training_meta: dict | None = None,
    smoke_row: EngineeredRow | None = None,
    model_metadata: dict | None = None,
) -> QuantileEnsemble:
    if params_a.quantile_alpha != params_b.quantile_alpha:
        raise gbqr.InvalidParams("both submodels must target the same quantile")
    a = gbqr.fit(train, params_a, model_metadata)
    b = gbqr.fit(train, params_b, model_metadata)
    ens = QuantileEnsemble(
        a, b, encoder, alpha=params_a.quantile_alpha, safety_factor=safety_factor,
        feature_config=feature_config or default_feature_config(),
        training_meta=dict(training_meta or {}),
    )
    if smoke_row is not None:
        attrs = attributes_from_row(smoke_row)
        ens.smoke = {"attributes": attrs, "expected": ens._smoke_value(ens.row_from_attributes(attrs))}
    ens.version = _version("ens", ens._payload())
    return ens


def classify_refine(clf: ThresholdClassifier, row: EngineeredRow, original_gb: float, task_id: str = "") -> RefinementDecision:
    return clf.refine_rows([row], [original_gb], [task_id])[0]


def ensemble_refine(ens: QuantileEnsemble, row: EngineeredRow, original_gb: float, task_id: str = "", clip: bool = True) -> RefinementDecision:
    return ens.refine_rows([row], [original_gb], [task_id], clip)[0]


def load_envelope(source):
    """Load a predictor from a path, JSON text or already-parsed dict."""
    try:
        if isinstance(source, dict):
            d = source
        elif isinstance(source, str) and source.lstrip().startswith("{"):
            d = json.loads(source)
        else:
            with open(source, encoding="utf-8") as fh:
                d = json.load(fh)
        fmt = d.get("format")
        if fmt == ENSEMBLE_FORMAT:
            return QuantileEnsemble.from_dict(d)
        if fmt == CLASSIFIER_FORMAT:
            return ThresholdClassifier.from_dict(d)
        raise ArtifactInvalid(f"unknown envelope format {fmt!r}")
    except ArtifactInvalid:
        raise
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as e:
        raise ArtifactInvalid(f"cannot load model envelope: {e}") from e


def dumps(model) -> str:
    return json.dumps(model.to_dict(), separators=(",", ":"))


def save_envelope(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(model))
