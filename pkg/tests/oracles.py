"""Independent reference computations used by the tests.

Nothing here imports the package's AP, matching or loss code; the oracles
work from first principles (enumeration, exact fractions, pixel counting).
"""

from __future__ import annotations

import itertools
from fractions import Fraction


def box_iou_exact(a, b) -> Fraction:
    """IoU of two (x1, y1, x2, y2) boxes with rational arithmetic."""
    ax1, ay1, ax2, ay2 = map(Fraction, a)
    bx1, by1, bx2, by2 = map(Fraction, b)
    iw = max(Fraction(0), min(ax2, bx2) - max(ax1, bx1))
    ih = max(Fraction(0), min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else Fraction(0)


def brute_force_assignment(dets, gts, thresh):
    """Enumerate every injective partial matching of ranked detections to GTs.

    ``dets`` are (box, score, image_id); ``gts`` are (box, image_id). Among all
    matchings that only pair boxes of the same image with IoU >= thresh, the
    greedy-by-rank one is the lexicographic maximum of the per-rank key
    (IoU of the claimed GT, lowest GT index first), unmatched counting as -1.
    Returns (rank order, list of matched GT index or None per rank).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    options = []
    for di in order:
        box, _, img = dets[di]
        opts = [None] + [
            gi for gi, (g, gimg) in enumerate(gts) if gimg == img and float(box_iou_exact(box, g)) >= thresh
        ]
        options.append(opts)
    best_key, best = None, None
    for combo in itertools.product(*options):
        chosen = [c for c in combo if c is not None]
        if len(chosen) != len(set(chosen)):
            continue
        key = tuple(
            (-1.0, 0) if c is None else (float(box_iou_exact(dets[di][0], gts[c][0])), -c)
            for di, c in zip(order, combo)
        )
        if best_key is None or key > best_key:
            best_key, best = key, list(combo)
    return order, best


def brute_force_ap(dets, gts, thresh) -> Fraction:
    """101-point interpolated AP straight from its definition, in exact arithmetic."""
    if not gts:
        return Fraction(1) if not dets else Fraction(0)
    _, assignment = brute_force_assignment(dets, gts, thresh)
    n_gt = len(gts)
    curve = []  # (recall, precision) at every cutoff
    tp = 0
    for k, c in enumerate(assignment, start=1):
        tp += c is not None
        curve.append((Fraction(tp, n_gt), Fraction(tp, k)))
    total = Fraction(0)
    for i in range(101):
        r = Fraction(i, 100)
        attainable = [p for rec, p in curve if rec >= r]
        total += max(attainable) if attainable else Fraction(0)
    return total / 101


def spearman_by_formula(xs, ys) -> float:
    """1 - 6 sum d^2 / (n (n^2 - 1)) for tie-free data."""
    n = len(xs)
    rx = {v: i + 1 for i, v in enumerate(sorted(xs))}
    ry = {v: i + 1 for i, v in enumerate(sorted(ys))}
    d2 = sum((rx[x] - ry[y]) ** 2 for x, y in zip(xs, ys))
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))
