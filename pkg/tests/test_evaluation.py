import csv
import io
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iou_balanced.evaluation import (
    COCO_THRESHOLDS,
    Detection,
    GroundTruth,
    ap_at_threshold,
    bin_index,
    coco_ap,
    interpolated_ap,
    match_detections,
    nms,
    nms_array,
    rank_correlation,
    score_iou_stats,
    write_ap_csv,
    write_bins_csv,
)
from iou_balanced.geometry import Box, boxes_to_array, iou

from instances import oracle_inputs, random_instance
from oracles import brute_force_ap, brute_force_assignment, spearman_by_formula


class TestNms:
    def test_single(self):
        d = Detection(Box(0, 0, 1, 1), 0.4)
        assert nms([d], 0.5) == [d]

    def test_example(self):
        b1 = Detection(Box(0, 0, 10, 10), 0.9)
        b2 = Detection(Box(0, 0, 10, 6), 0.8)  # IoU 0.6 with b1
        b3 = Detection(Box(20, 20, 30, 30), 0.7)
        assert iou(b1.box, b2.box) == pytest.approx(0.6)
        assert nms([b2, b3, b1], 0.5) == [b1, b3]

    def test_disjoint_sorted(self):
        ds = [Detection(Box(3 * i, 0, 3 * i + 1, 1), s) for i, s in enumerate([0.1, 0.9, 0.5, 0.5])]
        assert nms(ds, 0.3) == [ds[1], ds[2], ds[3], ds[0]]

    def test_class_aware(self):
        a = Detection(Box(0, 0, 4, 4), 0.9, class_id=0)
        b = Detection(Box(0, 0, 4, 4), 0.8, class_id=1)
        c = Detection(Box(0, 0, 4, 4), 0.7, class_id=0, image_id=1)
        assert nms([a, b, c], 0.5) == [a, b, c]

    def test_equal_iou_not_suppressed(self):
        a = Detection(Box(0, 0, 10, 10), 0.9)
        b = Detection(Box(0, 0, 10, 5), 0.8)  # IoU exactly 0.5
        assert nms([a, b], 0.5) == [a, b]

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            nms([], 1.5)

    @settings(max_examples=200)
    @given(st.integers(0, 10_000), st.sampled_from([0.3, 0.5, 0.7]))
    def test_properties(self, seed, thr):
        rng = np.random.default_rng(seed)
        dets, _ = random_instance(rng, max_dets=12, max_gts=3)
        kept = nms(dets, thr)
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert iou(kept[i].box, kept[j].box) <= thr
        if dets:
            arr_keep = nms_array(boxes_to_array([d.box for d in dets]), np.array([d.score for d in dets]), thr)
            assert [dets[i] for i in arr_keep] == kept


class TestAp:
    def test_single_perfect(self):
        gt = [Box(0, 0, 10, 10)]
        det = [Detection(Box(0, 0, 10, 6), 0.8)]  # IoU 0.6
        assert ap_at_threshold(det, gt, 0.5) == 1.0

    def test_ranked_example(self):
        gt = [Box(0, 0, 10, 10)]
        dets = [Detection(Box(0, 0, 10, 6), 0.9), Detection(Box(0, 0, 10, 3), 0.8)]
        assert ap_at_threshold(dets, gt, 0.5) == 1.0
        assert ap_at_threshold(dets, gt, 0.7) == 0.0

    def test_empty_conventions(self):
        assert ap_at_threshold([], [], 0.5) == 1.0
        assert ap_at_threshold([Detection(Box(0, 0, 1, 1), 0.5)], [], 0.5) == 0.0
        assert ap_at_threshold([], [Box(0, 0, 1, 1)], 0.5) == 0.0
        t = coco_ap([], [])
        assert t.empty_convention and t.mean == 1.0
        assert not coco_ap([], [Box(0, 0, 1, 1)]).empty_convention

    def test_interpolated_hand_case(self):
        # TP, FP, TP with two GTs: envelope is 1 up to recall .5, then 2/3
        expected = (51 * 1 + 50 * Fraction(2, 3)) / 101
        assert interpolated_ap([True, False, True], 2) == float(expected)

    def test_recall_on_grid_boundary(self):
        # recall 29/100 exactly: the sample at r=0.29 must see this rank
        tp = [True] * 29 + [False] * 71
        assert interpolated_ap(tp, 100) == float(Fraction(30, 101))

    def test_each_gt_matched_once(self):
        gt = [Box(0, 0, 10, 10)]
        dets = [Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(0, 0, 10, 10), 0.8)]
        _, tp = match_detections(dets, [GroundTruth(gt[0])], 0.5)
        assert tp == [True, False]

    def test_highest_iou_gt_claimed(self):
        gts = [GroundTruth(Box(0, 0, 10, 6)), GroundTruth(Box(0, 0, 10, 10))]
        dets = [Detection(Box(0, 0, 10, 9), 0.9), Detection(Box(0, 0, 10, 5), 0.8)]
        _, tp = match_detections(dets, gts, 0.5)
        # det0 takes the 10x10 GT (IoU .9), leaving the 10x6 GT for det1
        assert tp == [True, True]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2024)
        for trial in range(600):
            dets, gts = random_instance(rng, images=int(rng.integers(1, 3)))
            od, og = oracle_inputs(dets, gts)
            for thr in (0.5, 0.75):
                if gts:
                    order, assignment = brute_force_assignment(od, og, thr)
                    my_order, tp = match_detections(dets, gts, thr)
                    assert my_order == order
                    assert tp == [a is not None for a in assignment]
                expected = brute_force_ap(od, og, thr)
                assert ap_at_threshold(dets, gts, thr) == float(expected), trial

    @settings(max_examples=300)
    @given(st.integers(0, 100_000))
    def test_monotone_in_threshold(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_instance(rng, max_dets=8, max_gts=4, images=2)
        aps = coco_ap(dets, gts).aps
        assert all(b <= a for a, b in zip(aps, aps[1:]))


class TestCocoAp:
    def test_perfect(self):
        gts = [Box(0, 0, 5, 5), Box(10, 10, 20, 14)]
        dets = [Detection(g, 0.9 - 0.1 * i) for i, g in enumerate(gts)]
        t = coco_ap(dets, gts)
        assert t.aps == (1.0,) * 10
        assert t.ap50 == t.ap75 == t.ap90 == t.mean == 1.0

    def test_boundary_072(self):
        gt = [Box(0, 0, 100, 1)]
        det = [Detection(Box(0, 0, 72, 1), 0.8)]
        assert iou(det[0].box, gt[0]) == 0.72
        t = coco_ap(det, gt)
        assert t.ap70 == 1.0
        assert t.ap75 == 0.0
        assert t.at(0.7) == 1.0 and t.at(0.75) == 0.0

    def test_mean_definitional(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            dets, gts = random_instance(rng, 6, 3)
            t = coco_ap(dets, gts)
            assert abs(t.mean - sum(t.aps) / 10) <= 1e-12
            assert all(0.0 <= a <= 1.0 for a in t.aps)

    def test_thresholds(self):
        assert COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    def test_aliases_and_keyerror(self):
        t = coco_ap([], [Box(0, 0, 1, 1)])
        assert set(t.to_dict()) >= {"AP50", "AP60", "AP70", "AP75", "AP80", "AP90", "mean"}
        with pytest.raises(KeyError):
            t.at(0.42)

    def test_multiclass_average(self):
        gts = [GroundTruth(Box(0, 0, 4, 4), 0), GroundTruth(Box(0, 0, 4, 4), 1)]
        dets = [Detection(Box(0, 0, 4, 4), 0.9, 0)]
        assert ap_at_threshold(dets, gts, 0.5) == 0.5

    def test_csv(self):
        buf = io.StringIO()
        write_ap_csv(coco_ap([], [Box(0, 0, 1, 1)]), buf)
        rows = list(csv.reader(io.StringIO(buf.getvalue())))
        assert rows[0] == ["threshold", "ap"]
        assert [r[0] for r in rows[1:]] == [f"{t:.2f}" for t in COCO_THRESHOLDS]


class TestScoreIouStats:
    def test_all_perfect(self):
        gts = [Box(0, 0, 4, 4), Box(10, 10, 14, 14)]
        dets = [Detection(g, 0.6) for g in gts]
        st_ = score_iou_stats(dets, gts)
        assert len(st_.bins) == 1
        b = st_.bins[0]
        assert (b.bin_lo, b.bin_hi, b.mean_score, b.count) == (0.95, 1.0, 0.6, 2)

    def test_two_detection_example(self):
        gts = [Box(0, 0, 100, 1), Box(0, 10, 100, 11)]
        dets = [Detection(Box(0, 0, 52, 1), 0.3), Detection(Box(0, 10, 80, 11), 0.9)]
        st_ = score_iou_stats(dets, gts)
        assert st_.bin_mean(0.5) == 0.3
        assert st_.bin_mean(0.8) == 0.9
        assert st_.bin_mean(0.6) is None  # empty bins are absent
        assert len(st_.bins) == 2
        assert st_.exceedance[0.7] == 0.5
        assert st_.exceedance[0.5] == 1.0

    def test_low_iou_excluded_from_bins_but_counted(self):
        gts = [Box(0, 0, 10, 10)]
        dets = [Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(0, 0, 10, 2), 0.4)]
        st_ = score_iou_stats(dets, gts)
        assert sum(b.count for b in st_.bins) == 1
        assert st_.exceedance[0.5] == 0.5
        assert st_.n_detections == 2

    def test_bin_index_edges(self):
        assert bin_index(0.49) is None
        assert bin_index(0.5) == 0
        assert bin_index(0.55) == 1
        assert bin_index(0.9499) == 8
        assert bin_index(0.95) == 9
        assert bin_index(1.0) == 9

    @settings(max_examples=200)
    @given(st.integers(0, 10_000), st.randoms(use_true_random=False))
    def test_order_invariant(self, seed, shuffler):
        rng = np.random.default_rng(seed)
        dets, gts = random_instance(rng, max_dets=10, max_gts=3)
        shuffled = list(dets)
        shuffler.shuffle(shuffled)
        assert score_iou_stats(dets, gts).to_dict() == score_iou_stats(shuffled, gts).to_dict()

    def test_csv(self):
        gts = [Box(0, 0, 4, 4)]
        buf = io.StringIO()
        write_bins_csv(score_iou_stats([Detection(gts[0], 0.5)], gts), buf)
        rows = list(csv.reader(io.StringIO(buf.getvalue())))
        assert rows == [["bin_lo", "bin_hi", "mean_score", "count"], ["0.95", "1.00", "0.5", "1"]]


class TestRankCorrelation:
    def test_monotone(self):
        assert rank_correlation([(1, 10), (2, 20), (3, 35)]) == pytest.approx(1.0)
        assert rank_correlation([(1, 10), (2, 5), (3, 1)]) == pytest.approx(-1.0)

    def test_example(self):
        pairs = [(1, 3), (2, 1), (3, 2)]
        assert rank_correlation(pairs) == pytest.approx(-0.5, abs=1e-12)
        assert spearman_by_formula(*zip(*pairs)) == -0.5

    def test_constant_is_absent(self):
        assert rank_correlation([(1, 0.5), (2, 0.5)]) is None

    def test_too_few(self):
        with pytest.raises(ValueError):
            rank_correlation([(0.3, 0.2)])

    def test_ties_average_rank(self):
        # x ranks (1.5, 1.5, 3), y ranks (1, 2, 3): Pearson on ranks
        r = rank_correlation([(0.1, 1.0), (0.1, 2.0), (0.5, 3.0)])
        assert r == pytest.approx(math.sqrt(3) / 2, abs=1e-12)

    def test_matches_formula(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(3, 30))
            xs, ys = rng.permutation(n * 3)[:n].tolist(), rng.permutation(n * 3)[:n].tolist()
            assert rank_correlation(list(zip(xs, ys))) == pytest.approx(spearman_by_formula(xs, ys), abs=1e-12)
