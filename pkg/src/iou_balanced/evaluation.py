"""Greedy NMS, COCO-style average precision and score/IoU statistics."""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import stats

from .geometry import Box, boxes_to_array, iou, iou_matrix

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
BIN_EDGES: tuple[float, ...] = COCO_THRESHOLDS + (1.0,)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int = 0
    image_id: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int = 0
    image_id: int = 0


def _as_gt(g) -> GroundTruth:
    return g if isinstance(g, GroundTruth) else GroundTruth(g)


def _score_order(dets: Sequence[Detection]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy class-aware non-maximum suppression.

    Survivors are returned highest score first. A detection is discarded when
    its IoU with an already kept detection of the same class and image
    exceeds ``iou_thresh``.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in [0, 1]")
    order = _score_order(dets)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(
            k.class_id != d.class_id or k.image_id != d.image_id or iou(k.box, d.box) <= iou_thresh
            for k in kept
        ):
            kept.append(d)
    return kept


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Indices kept by single-class greedy NMS, highest score first."""
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        keep.append(order[pos])
        suppressed |= ious[pos] > iou_thresh
    return np.asarray(keep, dtype=int)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float
) -> tuple[list[int], list[bool]]:
    """Greedy by score rank: each detection claims the unmatched GT of highest IoU.

    Returns the score order and a TP flag per ranked detection. Equal IoUs go
    to the lowest GT index.
    """
    by_image: dict[tuple[int, int], list[int]] = defaultdict(list)
    for gi, g in enumerate(gts):
        by_image[(g.image_id, g.class_id)].append(gi)
    taken = [False] * len(gts)
    order = _score_order(dets)
    tp = []
    for di in order:
        d = dets[di]
        best, best_iou = -1, iou_thresh
        for gi in by_image.get((d.image_id, d.class_id), ()):
            if taken[gi]:
                continue
            v = iou(d.box, gts[gi].box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = gi, v
        if best >= 0:
            taken[best] = True
        tp.append(best >= 0)
    return order, tp


def interpolated_ap(tp: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from ranked TP flags.

    Computed in exact rational arithmetic and rounded once, so recall values
    that land on a grid point (e.g. 29/100) are never misplaced by rounding.
    """
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(np.asarray(tp, dtype=np.int64)).tolist()
    envelope = [Fraction(0)] * len(ctp)
    best = Fraction(0)
    for k in range(len(ctp) - 1, -1, -1):
        best = max(best, Fraction(ctp[k], k + 1))
        envelope[k] = best
    total = Fraction(0)
    k = 0
    for i in range(len(RECALL_POINTS)):
        # first rank whose recall ctp / n_gt reaches i / 100
        while k < len(ctp) and ctp[k] * 100 < i * n_gt:
            k += 1
        if k == len(ctp):
            break
        total += envelope[k]
    return float(total / len(RECALL_POINTS))


def ap_at_threshold(dets: Sequence[Detection], ground_truth: Sequence, iou_thresh: float) -> float:
    """COCO-style AP at one IoU threshold, averaged over classes that have ground truth.

    With no ground truth at all the result is 1.0 when there are also no
    detections and 0.0 otherwise.
    """
    gts = [_as_gt(g) for g in ground_truth]
    if not gts:
        return 1.0 if not dets else 0.0
    classes = sorted({g.class_id for g in gts})
    aps = []
    for c in classes:
        cd = [d for d in dets if d.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        _, tp = match_detections(cd, cg, iou_thresh)
        aps.append(interpolated_ap(tp, len(cg)))
    return float(np.mean(aps))


@dataclass(frozen=True)
class ApTable:
    thresholds: tuple[float, ...]
    aps: tuple[float, ...]
    empty_convention: bool = False

    @property
    def mean(self) -> float:
        return float(np.mean(self.aps))

    def at(self, threshold: float) -> float:
        for t, ap in zip(self.thresholds, self.aps):
            if abs(t - threshold) < 1e-9:
                return ap
        raise KeyError(threshold)

    @property
    def ap50(self) -> float:
        return self.at(0.5)

    @property
    def ap60(self) -> float:
        return self.at(0.6)

    @property
    def ap70(self) -> float:
        return self.at(0.7)

    @property
    def ap75(self) -> float:
        return self.at(0.75)

    @property
    def ap80(self) -> float:
        return self.at(0.8)

    @property
    def ap90(self) -> float:
        return self.at(0.9)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "ap": list(self.aps),
            "mean": self.mean,
            "AP50": self.ap50,
            "AP60": self.ap60,
            "AP70": self.ap70,
            "AP75": self.ap75,
            "AP80": self.ap80,
            "AP90": self.ap90,
            "empty_convention": self.empty_convention,
        }


def coco_ap(dets: Sequence[Detection], ground_truth: Sequence) -> ApTable:
    aps = tuple(ap_at_threshold(dets, ground_truth, t) for t in COCO_THRESHOLDS)
    return ApTable(COCO_THRESHOLDS, aps, empty_convention=not ground_truth and not dets)


def write_ap_csv(table: ApTable, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["threshold", "ap"])
    for t, ap in zip(table.thresholds, table.aps):
        writer.writerow([f"{t:.2f}", repr(ap)])


# -- score / IoU statistics ----------------------------------------------


@dataclass(frozen=True)
class ScoreBin:
    bin_lo: float
    bin_hi: float
    mean_score: float
    count: int


@dataclass(frozen=True)
class ScoreIouStats:
    bins: tuple[ScoreBin, ...]
    exceedance: dict[float, float | None]
    n_detections: int

    def bin_mean(self, lo: float) -> float | None:
        for b in self.bins:
            if abs(b.bin_lo - lo) < 1e-9:
                return b.mean_score
        return None

    def to_dict(self) -> dict:
        return {
            "bins": [asdict(b) for b in self.bins],
            "exceedance": {f"{t:.2f}": v for t, v in self.exceedance.items()},
            "n_detections": self.n_detections,
        }


def best_gt_iou(dets: Sequence[Detection], ground_truth: Sequence) -> np.ndarray:
    """IoU of each detection with its best-overlapping GT of the same image and class."""
    gts = [_as_gt(g) for g in ground_truth]
    out = np.zeros(len(dets))
    groups: dict[tuple[int, int], list[GroundTruth]] = defaultdict(list)
    for g in gts:
        groups[(g.image_id, g.class_id)].append(g)
    for i, d in enumerate(dets):
        cand = groups.get((d.image_id, d.class_id))
        if cand:
            out[i] = float(iou_matrix(boxes_to_array([d.box]), boxes_to_array([g.box for g in cand])).max())
    return out


def bin_index(v: float) -> int | None:
    """Index of the 0.05-wide bin holding ``v``; the top bin is closed at 1.0."""
    if v < BIN_EDGES[0] or v > BIN_EDGES[-1]:
        return None
    for k in range(len(BIN_EDGES) - 1):
        if v < BIN_EDGES[k + 1]:
            return k
    return len(BIN_EDGES) - 2


def score_iou_stats_from_pairs(scores: Iterable[float], ious: Iterable[float]) -> ScoreIouStats:
    scores = list(scores)
    ious = list(ious)
    sums = [0.0] * (len(BIN_EDGES) - 1)
    counts = [0] * (len(BIN_EDGES) - 1)
    for s, v in zip(scores, ious):
        k = bin_index(v)
        if k is not None:
            sums[k] += s
            counts[k] += 1
    bins = tuple(
        ScoreBin(BIN_EDGES[k], BIN_EDGES[k + 1], sums[k] / counts[k], counts[k])
        for k in range(len(counts))
        if counts[k]
    )
    n = len(ious)
    exceed = {t: (sum(v > t for v in ious) / n if n else None) for t in COCO_THRESHOLDS}
    return ScoreIouStats(bins, exceed, n)


def score_iou_stats(dets: Sequence[Detection], ground_truth: Sequence) -> ScoreIouStats:
    """Mean score per IoU bin over [0.5, 1.0] and the fraction of detections above each threshold.

    Detections whose best IoU is below 0.5 enter the exceedance denominators
    but no bin. Empty bins are omitted.
    """
    ious = best_gt_iou(dets, ground_truth)
    # sort by a canonical key so the floating-point bin sums do not depend on input order
    pairs = sorted(zip((d.score for d in dets), ious.tolist()))
    return score_iou_stats_from_pairs([p[0] for p in pairs], [p[1] for p in pairs])


def write_bins_csv(st: ScoreIouStats, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["bin_lo", "bin_hi", "mean_score", "count"])
    for b in st.bins:
        writer.writerow([f"{b.bin_lo:.2f}", f"{b.bin_hi:.2f}", repr(b.mean_score), b.count])


def rank_correlation(pairs: Sequence[tuple[float, float]]) -> float | None:
    """Spearman coefficient with average ranks for ties; None for constant input."""
    if len(pairs) < 2:
        raise ValueError("rank correlation needs at least two pairs")
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    rho = stats.spearmanr(x, y).statistic
    return float(np.clip(rho, -1.0, 1.0))
