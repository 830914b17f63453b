"""Axis-aligned boxes, IoU, the R-CNN offset parameterization and Bounded IoU.

Boxes are stored in corner form ``(x1, y1, x2, y2)``; the center form
``(cx, cy, w, h)`` is derived on access. Scalar helpers operate on
:class:`Box` values; the ``*_array`` variants work on ``(N, 4)`` numpy arrays
and are what the simulator uses in its inner loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

Axis = Literal["center", "size"]


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box has negative extent: {self}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> Box:
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def cx(self) -> float:
        return (self.x1 + self.x2) / 2.0

    @property
    def cy(self) -> float:
        return (self.y1 + self.y2) / 2.0

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def center_form(self) -> tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2


@dataclass(frozen=True)
class BoxDelta:
    """Regression offsets ``(dcx, dcy, dw, dh)`` of a box relative to an anchor."""

    dcx: float
    dcy: float
    dw: float
    dh: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.dcx, self.dcy, self.dw, self.dh

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 when the union is empty."""
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def encode(anchor: Box, target: Box) -> BoxDelta:
    """R-CNN offsets of ``target`` relative to ``anchor``.

    Raises:
        ValueError: if either box has a non-positive width or height.
    """
    if anchor.w <= 0.0 or anchor.h <= 0.0:
        raise ValueError(f"anchor must have positive width and height: {anchor}")
    if target.w <= 0.0 or target.h <= 0.0:
        raise ValueError(f"target must have positive width and height: {target}")
    return BoxDelta(
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
    )


def decode(anchor: Box, delta: BoxDelta) -> Box:
    if anchor.w <= 0.0 or anchor.h <= 0.0:
        raise ValueError(f"anchor must have positive width and height: {anchor}")
    if not delta.is_finite():
        raise ValueError(f"delta must be finite: {delta}")
    cx = anchor.cx + delta.dcx * anchor.w
    cy = anchor.cy + delta.dcy * anchor.h
    w = anchor.w * math.exp(delta.dw)
    h = anchor.h * math.exp(delta.dh)
    return Box.from_center(cx, cy, w, h)


def bounded_iou(delta_component: float, axis: Axis, w_t: float = 1.0, w_s: float = 1.0) -> float:
    """Upper bound on IoU when a box differs from its target in one offset only.

    For ``axis="center"`` the bound is ``(w_t - w_s|d|) / (w_t + w_s|d|)`` and
    requires ``|d| <= w_t / w_s``. For ``axis="size"`` it is ``exp(-|d|)``
    and the widths are ignored.
    """
    d = abs(delta_component)
    if axis == "size":
        return math.exp(-d)
    if axis != "center":
        raise ValueError(f"unknown axis {axis!r}")
    if w_t <= 0.0 or w_s <= 0.0:
        raise ValueError("w_t and w_s must be positive")
    if w_s * d > w_t:
        raise ValueError(f"|d|={d} exceeds w_t/w_s={w_t / w_s}; the bound is undefined there")
    return (w_t - w_s * d) / (w_t + w_s * d)


def clip_box(b: Box, bounds: Box) -> Box:
    x1 = min(max(b.x1, bounds.x1), bounds.x2)
    y1 = min(max(b.y1, bounds.y1), bounds.y2)
    x2 = min(max(b.x2, bounds.x1), bounds.x2)
    y2 = min(max(b.y2, bounds.y1), bounds.y2)
    return Box(x1, y1, x2, y2)


# -- array versions -------------------------------------------------------


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr, dtype=float).reshape(-1, 4)]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner-form arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally shaped ``(N, 4)`` arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = iw * ih
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def _center_form(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = arr[:, 2] - arr[:, 0]
    h = arr[:, 3] - arr[:, 1]
    return arr[:, 0] + w / 2.0, arr[:, 1] + h / 2.0, w, h


def encode_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=float)
    targets = np.asarray(targets, dtype=float)
    acx, acy, aw, ah = _center_form(anchors)
    tcx, tcy, tw, th = _center_form(targets)
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(tw <= 0) or np.any(th <= 0):
        raise ValueError("encode requires boxes with positive width and height")
    return np.stack([(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("deltas must be finite")
    acx, acy, aw, ah = _center_form(anchors)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def clip_array(boxes: np.ndarray, bounds: Box) -> np.ndarray:
    out = np.array(boxes, dtype=float, copy=True)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], bounds.x1, bounds.x2)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], bounds.y1, bounds.y2)
    return out
