"""Cross-entropy, smooth L1 and their IoU-balanced variants.

The IoU-based example weights are always treated as constants when
differentiating: gradients flow through the per-example loss terms only.
Every public function has a scalar or list-of-examples form; the ``*_array``
functions underneath carry the actual arithmetic and are shared by the
trainer, so list and array code paths agree bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .geometry import BoxDelta

log = logging.getLogger(__name__)

SCORE_EPS = 1e-7
DEFAULT_DELTA = 0.111

WeightMode = Literal["manual", "normalized"]


@dataclass(frozen=True)
class LossConfig:
    eta: float = 0.0
    lambda_: float = 0.0
    delta: float = DEFAULT_DELTA
    w_loc: float = 1.0
    loc_weight_mode: WeightMode = "manual"

    def __post_init__(self) -> None:
        if not self.eta >= 0.0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not self.lambda_ >= 0.0:
            raise ValueError(f"lambda_ must be >= 0, got {self.lambda_}")
        if not self.delta > 0.0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.w_loc > 0.0:
            raise ValueError(f"w_loc must be > 0, got {self.w_loc}")
        if self.loc_weight_mode not in ("manual", "normalized"):
            raise ValueError(f"unknown loc_weight_mode {self.loc_weight_mode!r}")


@dataclass(frozen=True)
class PositiveExample:
    score: float
    pred_delta: BoxDelta
    target_delta: BoxDelta
    iou: float
    label: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou must lie in [0, 1], got {self.iou}")

    @property
    def residual(self) -> tuple[float, float, float, float]:
        return tuple(p - t for p, t in zip(self.pred_delta.as_tuple(), self.target_delta.as_tuple()))


@dataclass(frozen=True)
class NegativeExample:
    score: float
    label: int = 0


@dataclass
class WeightDiagnostics:
    """Per-batch counters for degenerate weighting situations."""

    zero_iou_positives: int = 0
    cls_fallbacks: int = 0
    loc_fallbacks: int = 0

    def merge(self, other: WeightDiagnostics) -> None:
        self.zero_iou_positives += other.zero_iou_positives
        self.cls_fallbacks += other.cls_fallbacks
        self.loc_fallbacks += other.loc_fallbacks


def clamp_score(p):
    return np.clip(p, SCORE_EPS, 1.0 - SCORE_EPS)


def _check_prob(p) -> None:
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0.0)) or np.any(~(arr < 1.0)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")


# -- elementwise primitives ----------------------------------------------


def cross_entropy_array(p: np.ndarray, label: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    label = np.asarray(label, dtype=float)
    _check_prob(p)
    return -label * np.log(p) - (1.0 - label) * np.log1p(-p)


def smooth_l1_array(x: np.ndarray, delta: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    return np.where(ax <= delta, x * x / (2.0 * delta), ax - delta / 2.0)


def smooth_l1_grad_array(x: np.ndarray, delta: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= delta, x / delta, np.sign(x))


def cls_grad_array(p: np.ndarray, label: np.ndarray, weight: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    label = np.asarray(label, dtype=float)
    _check_prob(p)
    return np.asarray(weight, dtype=float) * (-label / p + (1.0 - label) / (1.0 - p))


def cross_entropy(p: float, label: int) -> float:
    return float(cross_entropy_array(np.float64(p), np.float64(label)))


def smooth_l1(x: float, delta: float = DEFAULT_DELTA) -> float:
    if not delta > 0.0:
        raise ValueError("delta must be > 0")
    return float(smooth_l1_array(np.float64(x), delta))


def cls_grad(p: float, label: int, weight: float) -> float:
    """Derivative of ``weight * CE(p, label)`` with respect to ``p``."""
    return float(cls_grad_array(np.float64(p), np.float64(label), np.float64(weight)))


# -- IoU-balanced weights -------------------------------------------------


def balanced_weights_array(
    iou: np.ndarray, per_example_loss: np.ndarray, exponent: float
) -> tuple[np.ndarray, bool]:
    """``iou**exponent`` rescaled so the weighted loss sum equals the plain sum.

    Returns the weights and a flag that is True when the weighted sum was zero
    and all-ones weights were substituted.
    """
    iou = np.asarray(iou, dtype=float)
    per_example_loss = np.asarray(per_example_loss, dtype=float)
    raw = iou**exponent
    total = np.sum(per_example_loss)
    weighted = np.sum(raw * per_example_loss)
    if not weighted > 0.0:
        return np.ones_like(iou), True
    return raw * (total / weighted), False


def cls_weights_array(
    iou: np.ndarray, scores: np.ndarray, eta: float, diag: WeightDiagnostics | None = None
) -> np.ndarray:
    ce = cross_entropy_array(clamp_score(scores), np.ones_like(np.asarray(scores, dtype=float)))
    weights, fallback = balanced_weights_array(iou, ce, eta)
    if diag is not None:
        diag.cls_fallbacks += int(fallback)
    if fallback:
        log.debug("classification weight normalizer is zero; using unit weights")
    return weights


def loc_weights_array(
    iou: np.ndarray, residuals: np.ndarray, cfg: LossConfig, diag: WeightDiagnostics | None = None
) -> np.ndarray:
    iou = np.asarray(iou, dtype=float)
    if cfg.loc_weight_mode == "manual":
        return cfg.w_loc * iou**cfg.lambda_
    per_example = np.sum(smooth_l1_array(residuals, cfg.delta), axis=1)
    weights, fallback = balanced_weights_array(iou, per_example, cfg.lambda_)
    if diag is not None:
        diag.loc_fallbacks += int(fallback)
    if fallback:
        log.debug("localization weight normalizer is zero; using unit weights")
    return weights


def _unpack(positives: Sequence[PositiveExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(positives) == 0:
        raise ValueError("at least one positive example is required")
    scores = np.array([p.score for p in positives], dtype=float)
    iou = np.array([p.iou for p in positives], dtype=float)
    residuals = np.array([p.residual for p in positives], dtype=float)
    return scores, iou, residuals


def _warn_zero_iou(iou: np.ndarray) -> None:
    n = int(np.count_nonzero(iou == 0.0))
    if n:
        log.info("%d positive example(s) with zero IoU receive zero weight", n)


def cls_weights(positives: Sequence[PositiveExample], eta: float) -> list[float]:
    scores, iou, _ = _unpack(positives)
    _warn_zero_iou(iou)
    diag = WeightDiagnostics()
    w = cls_weights_array(iou, scores, eta, diag)
    if diag.cls_fallbacks:
        log.warning("classification weights fell back to ones (zero normalizer)")
    return w.tolist()


def loc_weights(positives: Sequence[PositiveExample], cfg: LossConfig) -> list[float]:
    _, iou, residuals = _unpack(positives)
    _warn_zero_iou(iou)
    diag = WeightDiagnostics()
    w = loc_weights_array(iou, residuals, cfg, diag)
    if diag.loc_fallbacks:
        log.warning("localization weights fell back to ones (zero normalizer)")
    return w.tolist()


# -- losses and gradients ------------------------------------------------


def cls_loss_array(
    pos_scores: np.ndarray, pos_weights: np.ndarray, neg_scores: np.ndarray
) -> float:
    pos_scores = clamp_score(np.asarray(pos_scores, dtype=float))
    neg_scores = clamp_score(np.asarray(neg_scores, dtype=float))
    pos = np.sum(pos_weights * cross_entropy_array(pos_scores, np.ones_like(pos_scores)))
    neg = np.sum(cross_entropy_array(neg_scores, np.zeros_like(neg_scores)))
    return float(pos + neg)


def loc_loss_array(residuals: np.ndarray, weights: np.ndarray, delta: float) -> float:
    per_example = np.sum(smooth_l1_array(residuals, delta), axis=1)
    return float(np.sum(np.asarray(weights, dtype=float) * per_example))


def loc_grad_array(residuals: np.ndarray, weights: np.ndarray, delta: float) -> np.ndarray:
    """Gradient of the weighted smooth-L1 sum w.r.t. the predicted offsets."""
    return np.asarray(weights, dtype=float)[:, None] * smooth_l1_grad_array(residuals, delta)


def cls_loss(
    positives: Sequence[PositiveExample],
    negatives: Sequence[NegativeExample],
    cfg: LossConfig,
) -> float:
    scores, _, _ = _unpack(positives)
    weights = np.asarray(cls_weights(positives, cfg.eta))
    neg_scores = np.array([n.score for n in negatives], dtype=float)
    return cls_loss_array(scores, weights, neg_scores)


def loc_loss(positives: Sequence[PositiveExample], cfg: LossConfig) -> float:
    _, _, residuals = _unpack(positives)
    weights = np.asarray(loc_weights(positives, cfg))
    return loc_loss_array(residuals, weights, cfg.delta)


def loc_grad(positives: Sequence[PositiveExample], cfg: LossConfig) -> list[BoxDelta]:
    _, _, residuals = _unpack(positives)
    weights = np.asarray(loc_weights(positives, cfg))
    grads = loc_grad_array(residuals, weights, cfg.delta)
    return [BoxDelta(*map(float, row)) for row in grads]


def unweighted_cls_loss(positives: Sequence[PositiveExample], negatives: Sequence[NegativeExample]) -> float:
    """Plain cross-entropy sum, the reference the balanced loss reduces to."""
    scores, _, _ = _unpack(positives)
    neg_scores = np.array([n.score for n in negatives], dtype=float)
    return cls_loss_array(scores, np.ones_like(scores), neg_scores)


def unweighted_loc_loss(positives: Sequence[PositiveExample], delta: float = DEFAULT_DELTA) -> float:
    _, _, residuals = _unpack(positives)
    return loc_loss_array(residuals, np.ones(len(residuals)), delta)

