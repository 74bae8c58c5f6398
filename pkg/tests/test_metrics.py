import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magsd.dataset import Box
from magsd.metrics import (
    BinaryCounts,
    attention_heatmap,
    binary_metrics,
    build_report,
    confusion,
    iou,
    localize,
    macro_auc,
    per_class_metrics,
    roc_auc,
    summarize_folds,
)
from oracles import box_iou_by_pixels, class_metrics_from_pairs, pairwise_auc


def same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


class TestConfusion:
    def test_perfect(self):
        np.testing.assert_array_equal(confusion([0, 1, 2], [0, 1, 2], 3), np.eye(3))

    def test_all_one_class(self):
        np.testing.assert_array_equal(confusion([0, 1, 2], [0, 0, 0], 3), [[1, 0, 0], [1, 0, 0], [1, 0, 0]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion([0, 3], [0, 1], 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion([0, 1], [0], 2)


class TestClassMetrics:
    def test_worked_binary_example(self):
        m = binary_metrics(BinaryCounts(tp=40, tn=50, fp=5, fn=5))
        assert m["acc"] == 0.9
        assert m["sen"] == 40 / 45 and m["spc"] == 50 / 55 and m["f1"] == 80 / 90
        assert m["f1"] == pytest.approx(0.8889, abs=1e-4)

    def test_perfect(self):
        m = per_class_metrics(np.diag([3, 4, 5]))
        assert m.macro == {"acc": 1.0, "sen": 1.0, "spc": 1.0, "f1": 1.0}
        assert m.multiclass_accuracy == 1.0

    def test_absent_class_undefined(self):
        m = per_class_metrics(np.array([[2, 0, 0], [0, 3, 0], [0, 0, 0]]))
        assert (2, "sen") in m.undefined
        assert m.macro["sen"] == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            per_class_metrics(np.zeros((2, 2)))

    def test_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(150):
            k = int(rng.integers(2, 5))
            n = int(rng.integers(1, 40))
            y = rng.integers(0, k, n)
            p = np.where(rng.random(n) < 0.6, y, rng.integers(0, k, n))
            got = per_class_metrics(confusion(y, p, k))
            want = class_metrics_from_pairs(y.tolist(), p.tolist(), k)
            for g, w in zip(got.per_class, want):
                assert all(same(g[m], w[m]) for m in w)
            for m in ("acc", "sen", "spc", "f1"):
                vals = [w[m] for w in want if not math.isnan(w[m])]
                assert same(got.macro[m], float(np.mean(vals)) if vals else math.nan)
            assert got.multiclass_accuracy == float(np.sum(y == p)) / n

    def test_to_dict_has_no_nan(self):
        d = per_class_metrics(np.array([[2, 0], [0, 0]])).to_dict(["a", "b"])
        assert d["per_class"]["b"]["sen"] is None
        assert ["b", "sen"] in d["undefined"]


class TestRoc:
    def test_perfect_separation(self):
        r = roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert r.auc == 1.0

    def test_all_tied_is_diagonal(self):
        r = roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1])
        assert r.points == [(0.0, 0.0), (1.0, 1.0)] and r.auc == 0.5

    def test_endpoints_and_monotone(self):
        rng = np.random.default_rng(1)
        r = roc_auc(rng.random(50), rng.integers(0, 2, 50) | np.eye(1, 50, 0, dtype=int)[0])
        assert r.points[0] == (0.0, 0.0) and r.points[-1] == (1.0, 1.0)
        assert (np.diff(r.fpr) >= 0).all() and (np.diff(r.tpr) >= 0).all()

    def test_one_class_raises(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_matches_pairwise_estimator(self):
        rng = np.random.default_rng(2)
        for trial in range(120):
            n = 200 if trial == 0 else int(rng.integers(2, 60))
            y = rng.integers(0, 2, n)
            y[0], y[1] = 0, 1
            s = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding creates ties
            assert abs(roc_auc(s, y).auc - pairwise_auc(s.tolist(), y.tolist())) <= 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from(["exp", "cube", "affine", "logit"]))
    def test_monotone_invariance(self, seed, kind):
        rng = np.random.default_rng(seed)
        s = np.round(rng.random(40) * 0.98 + 0.01, 2)
        y = rng.integers(0, 2, 40)
        y[:2] = [0, 1]
        f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 3 * v - 7,
             "logit": lambda v: np.log(v / (1 - v))}[kind]
        assert abs(roc_auc(s, y).auc - roc_auc(f(s), y).auc) <= 1e-12

    def test_macro_auc_skips_absent_class(self):
        probs = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
        auc, per = macro_auc(probs, [0, 1, 0])
        assert per[2] is None and auc == pytest.approx((per[0] + per[1]) / 2)


class TestIou:
    def test_worked_box_example(self):
        assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == 1 / 7

    def test_identical_and_disjoint(self):
        assert iou(Box(1, 2, 5, 6), Box(1, 2, 5, 6)) == 1.0
        assert iou(Box(0, 0, 2, 2), Box(3, 3, 4, 4)) == 0.0

    def test_both_empty(self):
        assert iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 0.0

    def test_mask_vs_box(self):
        m = np.zeros((8, 8), bool)
        m[0:2, 0:2] = True
        assert iou(m, Box(1, 1, 3, 3)) == 1 / 7

    def test_matches_rasterized_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a = sorted(rng.integers(0, 12, 2)), sorted(rng.integers(0, 12, 2))
            b = sorted(rng.integers(0, 12, 2)), sorted(rng.integers(0, 12, 2))
            ba = Box(int(a[0][0]), int(a[1][0]), int(a[0][1]), int(a[1][1]))
            bb = Box(int(b[0][0]), int(b[1][0]), int(b[0][1]), int(b[1][1]))
            want = box_iou_by_pixels((ba.x0, ba.y0, ba.x1, ba.y1), (bb.x0, bb.y0, bb.x1, bb.y1), (12, 12))
            assert abs(iou(ba, bb) - want) < 1e-12
            assert iou(ba, bb) == iou(bb, ba)
            assert abs(iou(ba.to_mask((12, 12)), bb.to_mask((12, 12))) - want) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10), st.integers(0, 10), st.integers(1, 6), st.integers(1, 6))
    def test_self_iou_is_one(self, x, y, w, h):
        b = Box(x, y, x + w, y + h)
        assert iou(b, b) == 1.0 and iou(b.to_mask((20, 20)), b.to_mask((20, 20))) == 1.0


class TestLocalize:
    def test_threshold_zero_is_full_frame(self):
        a = np.random.default_rng(0).random((4, 7, 7))
        r = localize(a, (64, 64), 0.0, truth=Box(10, 10, 26, 42))
        assert r.mask.all() and r.iou == (16 * 32) / (64 * 64)

    def test_threshold_above_one_is_empty(self):
        a = np.random.default_rng(0).random((4, 7, 7))
        r = localize(a, (64, 64), 1.01, truth=Box(10, 10, 26, 42))
        assert not r.mask.any() and r.iou == 0.0

    def test_zero_attention_empty(self):
        r = localize(np.zeros((3, 7, 7)), (32, 32), 0.0)
        assert not r.mask.any() and r.box is None

    def test_single_peak_lands_in_its_cell(self):
        a = np.zeros((2, 7, 7))
        a[1, 2, 5] = 3.0
        r = localize(a, (224, 224), 0.9)
        ys, xs = np.nonzero(r.mask)
        assert 64 <= ys.mean() < 96 and 160 <= xs.mean() < 192

    def test_heatmap_range(self):
        h = attention_heatmap(np.random.default_rng(2).random((5, 7, 7)), (50, 60))
        assert h.shape == (50, 60) and h.min() >= 0 and h.max() <= 1


class TestReport:
    def test_build_and_summarize(self):
        probs = np.array([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4], [0.2, 0.8]])
        r = build_report([0, 1, 1, 1], probs, ["a", "b"])
        assert r.metrics.multiclass_accuracy == 0.75
        d = r.to_dict()
        assert d["confusion"] == [[1, 0], [1, 2]] and d["n"] == 4
        s = summarize_folds([r, r])
        assert s["multiclass_accuracy"] == {"mean": 0.75, "std": 0.0}
