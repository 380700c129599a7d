import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from igcam import attribution as A
from igcam import engine, metrics
from igcam.errors import UndefinedMetricError, ValidationError
from igcam.fixtures import quadrant_mask
from igcam.metrics import (DropIncrease, DropIncreaseTerm, GroundTruth, ImageRecord, MetricReport,
                           bbox_score, drop_increase, ebpg, keep_count, reported, threshold_top)
from igcam.pipeline import image_saliency

from oracles import bbox_loops, ebpg_loops, top_k_pixels

# frozen from the loop oracles on quadrant image 0 (grad_cam and integrated_grad_cam agree)
QUADRANT_EBPG = 0.9325695581014749
QUADRANT_BBOX = 1.0

maps = arrays(np.float64, (6, 6), elements=st.floats(0.0, 50.0, allow_nan=False))
masks = arrays(np.bool_, (6, 6)).filter(lambda m: m.any())


def qmap(fx, method="grad_cam", i=0):
    smap = A.explain(A.AttributionRequest(fx.model, fx.images[i], 0, method=method))
    return image_saliency(smap, 16, 16)


class TestGroundTruth:
    def test_counts(self):
        gt = GroundTruth(np.array([[0, 3], [255, 0]]))
        assert gt.positive_count == 2 and gt.mask.dtype == bool


class TestEbpg:
    def test_inside(self):
        mask = np.zeros((4, 4), bool)
        mask[1:3, 1:3] = True
        s = np.zeros((4, 4))
        s[1, 2] = 0.3
        s[2, 2] = 1.0
        assert ebpg(s, GroundTruth(mask)) == 1.0

    def test_uniform_half(self):
        mask = np.zeros((4, 4), bool)
        mask[:, :2] = True
        assert ebpg(np.ones((4, 4)), GroundTruth(mask)) == 0.5

    @pytest.mark.parametrize("method", ["grad_cam", "integrated_grad_cam"])
    def test_quadrant(self, quadrant, method):
        s = qmap(quadrant, method)
        gt = GroundTruth(quadrant_mask())
        assert ebpg(s, gt) == pytest.approx(ebpg_loops(s, gt.mask), rel=1e-14)
        assert ebpg(s, gt) == pytest.approx(QUADRANT_EBPG, rel=1e-12)

    def test_all_zero_undefined(self):
        with pytest.raises(UndefinedMetricError):
            ebpg(np.zeros((3, 3)), GroundTruth(np.ones((3, 3))))
        with pytest.raises(UndefinedMetricError):
            bbox_score(np.zeros((3, 3)), GroundTruth(np.ones((3, 3))))

    def test_empty_mask_undefined(self):
        with pytest.raises(UndefinedMetricError):
            ebpg(np.ones((3, 3)), GroundTruth(np.zeros((3, 3))))


class TestBbox:
    def test_top_inside(self):
        mask = np.zeros((4, 4), bool)
        mask[0, :3] = True
        s = np.zeros((4, 4))
        s[0, :3] = [3, 2, 1]
        s[3, 3] = 0.5
        assert bbox_score(s, GroundTruth(mask)) == 1.0

    def test_constant_tie_rule(self):
        first = np.zeros((4, 4), bool)
        first[:2] = True
        second = ~first
        assert bbox_score(np.ones((4, 4)), GroundTruth(first)) == 1.0
        assert bbox_score(np.ones((4, 4)), GroundTruth(second)) == 0.0
        left = np.zeros((4, 4), bool)
        left[:, :2] = True
        assert bbox_score(np.ones((4, 4)), GroundTruth(left)) == 0.5

    def test_quadrant(self, quadrant):
        s = qmap(quadrant)
        gt = GroundTruth(quadrant_mask())
        assert bbox_score(s, gt) == bbox_loops(s, gt.mask) == QUADRANT_BBOX

    def test_random_against_oracle(self, rng):
        for _ in range(20):
            s = np.round(rng.uniform(size=(7, 9)), 1)  # plenty of ties
            mask = rng.uniform(size=(7, 9)) < 0.3
            mask[0, 0] = True
            assert bbox_score(s, GroundTruth(mask)) == bbox_loops(s, mask)


class TestThreshold:
    def test_keep_count(self):
        assert keep_count(0.15, 100) == 15
        assert keep_count(0.15, 256) == 39
        assert keep_count(1.0, 7) == 7
        assert keep_count(1e-9, 10) == 1
        for bad in (0.0, 1.5, -0.1):
            with pytest.raises(ValidationError):
                keep_count(bad, 10)

    def test_fraction_one_identity(self, rng):
        img = rng.uniform(size=(3, 5, 5))
        assert np.array_equal(threshold_top(img, rng.uniform(size=(5, 5)), 1.0), img)

    def test_one_hot(self, rng):
        img = rng.uniform(0.1, 1.0, size=(3, 4, 4))
        s = np.zeros((4, 4))
        s[2, 1] = 1.0
        out = threshold_top(img, s, 1 / 16)
        assert np.count_nonzero(out.any(axis=0)) == 1
        assert np.array_equal(out[:, 2, 1], img[:, 2, 1])

    def test_quadrant_survivors(self, quadrant):
        img = quadrant.images[0]
        s = qmap(quadrant)
        out = threshold_top(img, s, 0.15)
        expected = np.zeros(256, bool)
        expected[list(top_k_pixels(s, 39))] = True
        assert np.array_equal(out[0].ravel(), np.where(expected, img[0].ravel(), 0.0))


class TestDropIncrease:
    def test_fraction_one(self, quadrant):
        def psi(x):
            return engine.score(quadrant.model, x, 0)

        items = [(img, qmap(quadrant, i=i)) for i, img in enumerate(quadrant.images[:3])]
        res = drop_increase(psi, items, 1.0)
        assert res.drop_pct == 0.0 and res.increase_pct == 0.0

    def test_constant_logits(self, rng):
        items = [(rng.uniform(size=(1, 4, 4)), rng.uniform(size=(4, 4))) for _ in range(4)]
        res = drop_increase(lambda x: 0.5, items, 0.15)
        assert res.drop_pct == 0.0 and res.increase_pct == 0.0 and res.signed_increase_mean == 0.0

    def test_quadrant_brute_force(self, quadrant):
        model = quadrant.model
        s = quadrant_mask().astype(float)
        terms = []
        for img in quadrant.images:
            keep = top_k_pixels(s, math.ceil(0.15 * 256))
            flat = np.zeros(256, bool)
            flat[list(keep)] = True
            masked = img * flat.reshape(16, 16)
            terms.append((engine.score(model, img, 0), engine.score(model, masked, 0)))
        drop = 100 * sum(max(a - b, 0) / a for a, b in terms) / len(terms)
        inc = 100 * sum(b > a for a, b in terms) / len(terms)
        res = drop_increase(lambda x: engine.score(model, x, 0), [(img, s) for img in quadrant.images])
        assert res.drop_pct == pytest.approx(drop, rel=1e-12, abs=1e-15)
        assert res.increase_pct == inc

    def test_empty(self):
        with pytest.raises(ValidationError):
            drop_increase(lambda x: 1.0, [])

    def test_non_positive_confidence(self):
        with pytest.raises(ValidationError):
            drop_increase(lambda x: 0.0, [(np.ones((1, 2, 2)), np.ones((2, 2)))])

    def test_signed_mean_can_be_negative(self):
        res = DropIncrease((DropIncreaseTerm(1.0, 0.5), DropIncreaseTerm(1.0, 0.2), DropIncreaseTerm(0.5, 0.9)))
        assert res.signed_increase_mean == pytest.approx(-100 / 3)
        assert res.increase_pct == pytest.approx(100 / 3)
        assert res.drop_pct == pytest.approx(100 * (0.5 + 0.8) / 3)

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(1e-6, 1.0), b=st.floats(0.0, 1.0))
    def test_flags_exclusive(self, a, b):
        t = DropIncreaseTerm(a, b)
        assert not (t.drop > 0 and t.increased)
        assert 0.0 <= t.drop <= 1.0


class TestReport:
    def test_aggregates_recomputable(self):
        recs = [ImageRecord("a", 0, 0.5, 1.0, 0.2, 0, 1.0, 0.8, -1),
                ImageRecord("b", 0, None, None, 0.0, 1, 0.5, 0.6, 1),
                ImageRecord("c", 1, 0.25, 0.5, 0.1, 0, 0.9, 0.81, -1)]
        agg = MetricReport("grad_cam", recs).aggregates()
        assert agg["K"] == 3 and agg["skipped"] == 1
        assert agg["ebpg_mean_pct"] == reported(37.5)
        assert agg["bbox_mean_pct"] == reported(75.0)
        assert agg["drop_pct"] == reported(10.0)
        assert agg["increase_pct"] == reported(100 / 3)
        assert agg["signed_increase_mean"] == reported(-100 / 3)

    def test_reported_rounding(self):
        assert reported(None) is None
        assert reported(1 / 3) == round(1 / 3, metrics.REPORT_DECIMALS)


class TestInvariants:
    @settings(max_examples=80, deadline=None)
    @given(s=maps, mask=masks, lam=st.sampled_from([0.5, 3.0, 1e6, 1e-3]))
    def test_scale_invariance(self, s, mask, lam):
        if not np.any(s > 0):
            return
        gt = GroundTruth(mask)
        assert reported(ebpg(lam * s, gt)) == reported(ebpg(s, gt))
        assert bbox_score(lam * s, gt) == bbox_score(s, gt)

    @settings(max_examples=80, deadline=None)
    @given(s=maps, mask=masks)
    def test_bbox_monotone_transform(self, s, mask):
        if not np.any(s > 0):
            return
        gt = GroundTruth(mask)
        assert bbox_score(np.sqrt(s) + s ** 3, gt) == bbox_score(s, gt)

    @settings(max_examples=50, deadline=None)
    @given(mask=masks)
    def test_indicator(self, mask):
        gt = GroundTruth(mask)
        s = mask.astype(float)
        assert ebpg(s, gt) == 1.0 and bbox_score(s, gt) == 1.0
