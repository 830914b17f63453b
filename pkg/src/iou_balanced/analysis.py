"""Gradient-norm curves, finite-difference gradient checks and w_loc calibration."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Literal, Sequence

import numpy as np

from .geometry import Axis, bounded_iou
from .losses import (
    DEFAULT_DELTA,
    PositiveExample,
    cls_grad_array,
    cls_loss_array,
    cls_weights_array,
    loc_grad_array,
    loc_loss_array,
    smooth_l1_array,
)

FD_STEP = 1e-6
FD_TOLERANCE = 1e-4
KINK_MARGIN = 1e-3

# (lambda, w_loc) pairs tuned on COCO for the localization loss.
LOC_PRESETS: dict[float, float] = {0.0: 1.0, 0.5: 1.575, 1.0: 2.226, 1.5: 3.049, 1.8: 3.649}
ETA_PRESETS: tuple[float, ...] = (0.0, 1.0, 1.4, 1.5, 1.6)

CURVE_COLUMNS = ("d", "grad_norm", "lambda", "w_loc", "axis")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CurveSpec:
    lambda_: float
    w_loc: float = 1.0
    delta: float = DEFAULT_DELTA
    axis: Axis = "center"
    d_min: float = -0.99
    d_max: float = 0.99
    n_points: int = 199

    def __post_init__(self) -> None:
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if not self.d_max > self.d_min:
            raise ValueError("d_max must exceed d_min")
        if self.axis not in ("center", "size"):
            raise ValueError(f"unknown axis {self.axis!r}")
        if self.axis == "center" and max(abs(self.d_min), abs(self.d_max)) >= 1.0:
            raise ValueError("center-axis curves require |d| < 1")
        if self.lambda_ < 0 or self.w_loc <= 0 or self.delta <= 0:
            raise ValueError("need lambda_ >= 0, w_loc > 0, delta > 0")

    def grid(self) -> np.ndarray:
        return np.linspace(self.d_min, self.d_max, self.n_points)


@dataclass(frozen=True)
class CurvePoint:
    d: float
    grad_norm: float


def gradient_norm_at(d: float, lambda_: float, w_loc: float, delta: float, axis: Axis) -> float:
    """Upper bound of ``|d(w * smoothL1)/dd|`` with the weight's IoU at its Bounded-IoU value."""
    weight = w_loc * bounded_iou(d, axis) ** lambda_
    slope = d / delta if abs(d) <= delta else math.copysign(1.0, d)
    return abs(weight * slope)


def gradient_norm_curve(spec: CurveSpec) -> list[CurvePoint]:
    return [
        CurvePoint(float(d), gradient_norm_at(float(d), spec.lambda_, spec.w_loc, spec.delta, spec.axis))
        for d in spec.grid()
    ]


def write_curve_csv(curves: Iterable[tuple[CurveSpec, Sequence[CurvePoint]]], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for spec, points in curves:
        for pt in points:
            writer.writerow([repr(pt.d), repr(pt.grad_norm), repr(spec.lambda_), repr(spec.w_loc), spec.axis])


# -- finite differences ---------------------------------------------------


@dataclass
class GradCheckReport:
    loss_kind: str
    trials: int
    points_checked: int
    max_rel_error: float
    tolerance: float = FD_TOLERANCE
    worst_point: dict | None = None
    failures: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def central_difference(f, x: np.ndarray, index: tuple, step: float = FD_STEP) -> float:
    xp = np.array(x, dtype=float, copy=True)
    xm = np.array(x, dtype=float, copy=True)
    xp[index] += step
    xm[index] -= step
    return (f(xp) - f(xm)) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale


def _away_from_kink(rng: np.random.Generator, size, delta: float, scale: float) -> np.ndarray:
    x = rng.uniform(-scale, scale, size=size)
    bad = np.abs(np.abs(x) - delta) < KINK_MARGIN
    while np.any(bad):
        x[bad] = rng.uniform(-scale, scale, size=int(bad.sum()))
        bad = np.abs(np.abs(x) - delta) < KINK_MARGIN
    return x


def finite_diff_check(
    loss_kind: Literal["cls", "loc"],
    trial_count: int,
    seed: int,
    *,
    delta: float = DEFAULT_DELTA,
    quadratic_only: bool = False,
    step: float = FD_STEP,
    tolerance: float = FD_TOLERANCE,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on random batches.

    Each trial draws a random batch, freezes its IoU-based weights, and checks
    the derivative with respect to one randomly chosen input. Failures are
    collected in the report rather than raised.
    """
    if trial_count < 1:
        raise ValueError("trial_count must be >= 1")
    if loss_kind not in ("cls", "loc"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(loss_kind, trial_count, 0, 0.0, tolerance)
    for trial in range(trial_count):
        n = int(rng.integers(1, 9))
        iou = rng.uniform(0.0, 1.0, size=n)
        if loss_kind == "loc":
            if quadratic_only:
                residuals = rng.uniform(-delta + KINK_MARGIN, delta - KINK_MARGIN, size=(n, 4))
            else:
                residuals = _away_from_kink(rng, (n, 4), delta, 1.0)
            lam = float(rng.choice([0.0, 0.5, 1.0, 1.5, 1.8]))
            weights = rng.uniform(0.5, 4.0) * iou**lam

            def frozen(r, w=weights):
                return loc_loss_array(r, w, delta)

            grads = loc_grad_array(residuals, weights, delta)
            i, m = int(rng.integers(n)), int(rng.integers(4))
            analytic = float(grads[i, m])
            numeric = central_difference(frozen, residuals, (i, m), step)
            point = {"trial": trial, "example": i, "coord": m, "d": float(residuals[i, m]), "weight": float(weights[i])}
        else:
            pos = rng.uniform(0.01, 0.99, size=n)
            neg = rng.uniform(0.01, 0.99, size=int(rng.integers(0, 9)))
            eta = float(rng.choice([0.0, 0.5, 1.0, 1.5, 2.0]))
            weights = cls_weights_array(iou, pos, eta)
            probs = np.concatenate([pos, neg])
            labels = np.concatenate([np.ones(n), np.zeros(len(neg))])
            all_w = np.concatenate([weights, np.ones(len(neg))])

            def frozen(p, w=weights, n=n):
                return cls_loss_array(p[:n], w, p[n:])

            i = int(rng.integers(len(probs)))
            analytic = float(cls_grad_array(probs[i], labels[i], all_w[i]))
            numeric = central_difference(frozen, probs, (i,), step)
            point = {"trial": trial, "index": i, "p": float(probs[i]), "label": int(labels[i]), "weight": float(all_w[i])}
        err = relative_error(analytic, numeric)
        point.update(analytic=analytic, numeric=numeric, rel_error=err)
        report.points_checked += 1
        if err > report.max_rel_error or report.worst_point is None:
            report.max_rel_error = max(report.max_rel_error, err)
            report.worst_point = point
        if err > tolerance:
            report.failures.append(point)
    return report


# -- calibration ----------------------------------------------------------


def calibrate_w_loc_array(iou: np.ndarray, residuals: np.ndarray, lambda_: float, delta: float) -> float:
    per_example = np.sum(smooth_l1_array(residuals, delta), axis=1)
    plain = np.sum(per_example)
    weighted = np.sum(np.asarray(iou, dtype=float) ** lambda_ * per_example)
    if not (plain > 0.0 and weighted > 0.0):
        raise CalibrationError("calibration batch has zero (weighted) localization loss")
    return float(plain / weighted)


def calibrate_w_loc(positives: Sequence[PositiveExample], lambda_: float, delta: float = DEFAULT_DELTA) -> float:
    """Localization weight that keeps the weighted loss sum equal to the plain one on this batch."""
    if len(positives) == 0:
        raise CalibrationError("calibration needs at least one positive example")
    iou = np.array([p.iou for p in positives], dtype=float)
    residuals = np.array([p.residual for p in positives], dtype=float)
    return calibrate_w_loc_array(iou, residuals, lambda_, delta)
