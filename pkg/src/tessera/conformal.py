"""Split-conformal calibration over (prediction, difficulty scale) pairs.

Nonconformity is the absolute residual divided by a per-sample scale plus
a small epsilon. The calibration quantile uses the finite-sample index
k = ceil((1 - alpha) * (n_cal + 1)) over the sorted scores and becomes
+inf when k exceeds n_cal, in which case every interval is the whole line.
A constant scale of one recovers the classical unnormalized baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CalibrationError, DimensionError
from .nn import Array
from . import serialize

EPSILON_DEFAULT = 1e-8
ALPHA_DEFAULT = 0.10
RESULT_VERSION = 1

# Slack for the quantile index: binary float products like 0.82 * 500 land a
# hair above the exact integer and must not bump the order statistic.
_CEIL_SLACK = 1e-9


class ScaleKind(str, Enum):
    EPISTEMIC = "epistemic"
    ALEATORIC = "aleatoric"
    CONSTANT = "constant"


def _as_vector(x, name: str) -> Array:
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size == 0:
        raise DimensionError(f"{name} must be nonempty")
    return v


def nonconformity_scores(y: Array, mu_hat: Array, scale: Array,
                         epsilon: float = EPSILON_DEFAULT) -> Array:
    """Scaled absolute residuals |y - mu| / (scale + epsilon)."""
    yv = _as_vector(y, "y")
    mv = _as_vector(mu_hat, "mu_hat")
    sv = _as_vector(scale, "scale")
    if not (yv.shape == mv.shape == sv.shape):
        raise DimensionError("y, mu_hat, scale must have equal lengths")
    if epsilon < 0:
        raise CalibrationError("epsilon must be nonnegative")
    if np.any(sv < 0):
        raise CalibrationError("scales must be nonnegative")
    denom = sv + epsilon
    if np.any(denom == 0.0):
        raise CalibrationError("scale + epsilon must be positive everywhere")
    return np.abs(yv - mv) / denom


def conformal_quantile(scores: Array, alpha: float = ALPHA_DEFAULT) -> float:
    """Finite-sample calibration quantile of the scores.

    Returns the k-th smallest score with k = ceil((1 - alpha) * (n + 1)),
    or +inf when k > n.
    """
    s = _as_vector(scores, "scores")
    if not (0.0 < alpha < 1.0):
        raise CalibrationError("alpha must lie strictly between 0 and 1")
    if not np.all(np.isfinite(s)):
        raise CalibrationError("scores must be finite")
    if np.any(s < 0):
        raise CalibrationError("scores must be nonnegative")
    n = s.size
    k = math.ceil((1.0 - alpha) * (n + 1) - _CEIL_SLACK)
    if k > n:
        return math.inf
    return float(np.partition(s, k - 1)[k - 1])


@dataclass(frozen=True)
class CalibrationResult:
    """Everything needed to build intervals later: the scale family that was
    calibrated, the miscoverage level, and the resulting quantile."""

    kind: ScaleKind
    alpha: float
    epsilon: float
    n_cal: int
    q_hat: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ScaleKind(self.kind))
        if not (0.0 < self.alpha < 1.0):
            raise CalibrationError("alpha must lie strictly between 0 and 1")
        if self.epsilon < 0:
            raise CalibrationError("epsilon must be nonnegative")
        if self.n_cal < 1:
            raise CalibrationError("n_cal must be >= 1")
        if math.isnan(self.q_hat) or self.q_hat < 0:
            raise CalibrationError("q_hat must be nonnegative")
        should_be_inf = math.ceil((1.0 - self.alpha) * (self.n_cal + 1) - _CEIL_SLACK) > self.n_cal
        if math.isinf(self.q_hat) != should_be_inf:
            raise CalibrationError("q_hat finiteness is inconsistent with alpha and n_cal")

    @property
    def infinite(self) -> bool:
        return math.isinf(self.q_hat)

    def to_dict(self) -> dict:
        return {
            "format_version": RESULT_VERSION,
            "kind": self.kind.value,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "n_cal": self.n_cal,
            "q_hat": self.q_hat,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        if d.get("format_version") != RESULT_VERSION:
            raise CalibrationError(f"unsupported calibration version {d.get('format_version')!r}")
        return cls(kind=ScaleKind(d["kind"]), alpha=float(d["alpha"]),
                   epsilon=float(d["epsilon"]), n_cal=int(d["n_cal"]),
                   q_hat=serialize.from_jsonable_float(d["q_hat"]))

    def save(self, path) -> None:
        serialize.dump(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        return cls.from_dict(serialize.load(path))


def calibrate(y_cal: Array, mu_cal: Array, scale_cal: Array | None = None,
              kind: ScaleKind | str = ScaleKind.CONSTANT,
              alpha: float = ALPHA_DEFAULT,
              epsilon: float = EPSILON_DEFAULT) -> CalibrationResult:
    """Split-conformal calibration on held-out residuals.

    For ``constant`` the scale is identically one and ``scale_cal`` is
    ignored; otherwise a per-sample scale vector is required.
    """
    kind = ScaleKind(kind)
    yv = _as_vector(y_cal, "y_cal")
    if kind is ScaleKind.CONSTANT:
        scale = np.ones_like(yv)
    else:
        if scale_cal is None:
            raise CalibrationError(f"scale_cal is required for kind={kind.value!r}")
        scale = scale_cal
    scores = nonconformity_scores(yv, mu_cal, scale, epsilon)
    q_hat = conformal_quantile(scores, alpha)
    return CalibrationResult(kind=kind, alpha=alpha, epsilon=epsilon,
                             n_cal=yv.size, q_hat=q_hat)


@dataclass
class PredictionIntervals:
    """Per-sample intervals [lower, upper] around a point prediction.

    ``scale`` keeps the per-sample difficulty signal the intervals were
    built from (standard-deviation-like units; ones for the classical
    baseline). ``half`` is the intended half-width; widths derive from it
    so a constant-scale family has bitwise-identical widths even when the
    rounded bounds differ in the last ulp across centers.
    """

    center: Array
    lower: Array
    upper: Array
    scale: Array
    half: Array | None = None

    def __post_init__(self):
        self.center = _as_vector(self.center, "center")
        self.lower = _as_vector(self.lower, "lower")
        self.upper = _as_vector(self.upper, "upper")
        self.scale = _as_vector(self.scale, "scale")
        if not (self.center.shape == self.lower.shape == self.upper.shape == self.scale.shape):
            raise DimensionError("interval fields must have equal lengths")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise DimensionError("interval bounds must not be NaN")
        if np.any(self.lower > self.center) or np.any(self.center > self.upper):
            raise DimensionError("intervals must bracket their centers")
        if self.half is None:
            self.half = (self.upper - self.lower) / 2.0
        else:
            self.half = _as_vector(self.half, "half")
            if self.half.shape != self.center.shape:
                raise DimensionError("half must have one entry per interval")
            if np.any(np.isnan(self.half)) or np.any(self.half < 0):
                raise DimensionError("half-widths must be nonnegative")

    @property
    def n(self) -> int:
        return self.center.size

    @property
    def width(self) -> Array:
        return 2.0 * self.half

    @property
    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def covers(self, y: Array) -> Array:
        """Boolean per-sample coverage; endpoints count as covered."""
        yv = _as_vector(y, "y")
        if yv.shape != self.center.shape:
            raise DimensionError("y must have one entry per interval")
        return (self.lower <= yv) & (yv <= self.upper)


def build_intervals(calib: CalibrationResult, mu_test: Array,
                    scale_test: Array | None = None) -> PredictionIntervals:
    """Intervals mu +/- q_hat * scale for the calibrated scale family.

    An infinite quantile yields the whole real line for every sample.
    """
    mv = _as_vector(mu_test, "mu_test")
    if calib.kind is ScaleKind.CONSTANT:
        scale = np.ones_like(mv)
    else:
        if scale_test is None:
            raise CalibrationError(f"scale_test is required for kind={calib.kind.value!r}")
        scale = _as_vector(scale_test, "scale_test")
        if scale.shape != mv.shape:
            raise DimensionError("mu_test and scale_test must have equal lengths")
        if np.any(scale < 0):
            raise CalibrationError("scales must be nonnegative")
    if calib.infinite:
        half = np.full_like(mv, np.inf)
        lower = np.full_like(mv, -np.inf)
        upper = np.full_like(mv, np.inf)
    else:
        half = calib.q_hat * scale
        lower = mv - half
        upper = mv + half
    return PredictionIntervals(center=mv, lower=lower, upper=upper, scale=scale,
                               half=half)
