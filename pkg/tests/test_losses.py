"""Loss assembly tests with component-wise re-computation oracles."""

import math
from dataclasses import dataclass

import numpy as np
import pytest

from patchdet import geometry as G
from patchdet import losses as L
from patchdet import tensor as T
from patchdet.matcher import Assignment, build_cost, hungarian
from patchdet.tensor import Tensor


@dataclass
class Preds:
    class_logits: Tensor
    boxes: Tensor
    rec_features: Tensor


def make_preds(rng, n, k=2, c=6, grad=True):
    return Preds(
        class_logits=Tensor(rng.normal(size=(n, k)), requires_grad=grad),
        boxes=Tensor(rng.uniform(0.2, 0.8, size=(n, 4)), requires_grad=grad),
        rec_features=Tensor(rng.normal(size=(n, c)), requires_grad=grad),
    )


class TestRecLoss:
    def test_identical_is_zero(self):
        p = Tensor(np.array([1.0, 2.0, 3.0]))
        assert np.isclose(L.rec_loss(p, p).item(), 0.0)

    def test_antipodal_is_four(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]))
        q = Tensor(-p.data)
        assert np.isclose(L.rec_loss(p, q).item(), 4.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.normal(size=8))
        q = Tensor(3.7 * p.data)
        assert L.rec_loss(p, q).item() <= 1e-10

    def test_symmetry_and_rescale(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = Tensor(rng.normal(size=5))
            q = Tensor(rng.normal(size=5))
            forward = L.rec_loss(p, q).item()
            backward = L.rec_loss(q, p).item()
            rescaled = L.rec_loss(Tensor(2.5 * p.data), Tensor(0.3 * q.data)).item()
            assert np.isclose(forward, backward, atol=1e-12)
            assert np.isclose(forward, rescaled, atol=1e-10)
            assert 0.0 <= forward <= 4.0 + 1e-12


class TestClsLoss:
    def test_uniform_logits(self):
        loss = L.cls_loss(Tensor(np.zeros(2)), 0, 1.0)
        assert np.isclose(loss.item(), math.log(2.0))

    def test_balance_weight(self):
        loss = L.cls_loss(Tensor(np.zeros(2)), 1, 0.1)
        assert np.isclose(loss.item(), 0.1 * math.log(2.0))

    def test_saturated_correct(self):
        loss = L.cls_loss(Tensor(np.array([-30.0, 30.0])), 1, 1.0)
        assert loss.item() < 1e-12

    def test_rejects_nonpositive_weight(self):
        with pytest.raises(ValueError):
            L.cls_loss(Tensor(np.zeros(2)), 0, 0.0)


class TestHungarianLoss:
    def test_perfect_predictions_near_zero(self):
        n, c = 4, 5
        gt_boxes = np.array([[0.5, 0.5, 0.4, 0.4]])
        gt_feats = np.array([[1.0, 0.0, 0.0, 0.0, 2.0]])
        logits = np.full((n, 2), 0.0)
        logits[:, 0] = 30.0
        logits[0] = [-30.0, 30.0]
        boxes = np.tile([0.1, 0.1, 0.05, 0.05], (n, 1))
        boxes[0] = gt_boxes[0]
        feats = np.zeros((n, c))
        feats[0] = gt_feats[0]
        preds = Preds(Tensor(logits), Tensor(boxes), Tensor(feats))
        assignment = Assignment(pairs=((0, 0),), total_cost=0.0)
        out = L.hungarian_loss(preds, gt_boxes, gt_feats, assignment, 1, n)
        assert out.total.item() < 1e-8

    def test_class_balance_weight_tenth(self):
        # M=10, N=100: unmatched weight must be exactly M/N = 0.1
        n, m = 100, 10
        rng = np.random.default_rng(3)
        preds = Preds(
            Tensor(np.zeros((n, 2))),
            Tensor(rng.uniform(0.3, 0.7, size=(n, 4))),
            Tensor(rng.normal(size=(n, 4))),
        )
        gt_boxes = rng.uniform(0.3, 0.7, size=(m, 4))
        gt_feats = rng.normal(size=(m, 4))
        assignment = Assignment(pairs=tuple((i, i) for i in range(m)), total_cost=0.0)
        out = L.hungarian_loss(preds, gt_boxes, gt_feats, assignment, m, n,
                               use_reconstruction=False)
        expected_cls = m * math.log(2.0) + (n - m) * (m / n) * math.log(2.0)
        assert np.isclose(out.cls.item(), expected_cls, atol=1e-10)

    def test_hand_assembled_small_instance(self):
        # M=1, N=4: recompute every component independently and compare
        rng = np.random.default_rng(17)
        n, c = 4, 3
        preds = make_preds(rng, n, c=c, grad=False)
        gt_boxes = rng.uniform(0.3, 0.7, size=(1, 4))
        gt_feats = rng.normal(size=(1, c))
        assignment = Assignment(pairs=((0, 2),), total_cost=0.0)

        out = L.hungarian_loss(preds, gt_boxes, gt_feats, assignment, 1, n)

        def ce(logits, target):
            z = logits - logits.max()
            return -(z[target] - math.log(np.exp(z).sum()))

        expected = 0.0
        for q in range(n):
            target = 1 if q == 2 else 0
            weight = 1.0 if q == 2 else 1 / 4
            expected += weight * ce(preds.class_logits.data[q], target)
        expected += G.box_loss(
            Tensor(preds.boxes.data[2]), Tensor(gt_boxes[0])
        ).item()

        def unit(v):
            return v / np.linalg.norm(v)

        diff = unit(gt_feats[0]) - unit(preds.rec_features.data[2])
        expected += float((diff * diff).sum())
        assert np.isclose(out.total.item(), expected, atol=1e-10)
        assert np.isclose(
            out.total.item(),
            out.cls.item() + out.box.item() + out.rec.item(),
            atol=1e-12,
        )

    def test_zero_matches_still_finite(self):
        rng = np.random.default_rng(5)
        preds = make_preds(rng, 6, grad=False)
        assignment = Assignment(pairs=(), total_cost=0.0)
        out = L.hungarian_loss(preds, np.zeros((0, 4)), np.zeros((0, 6)), assignment, 2, 6)
        assert np.isfinite(out.total.item())
        assert out.box.item() == 0.0 and out.rec.item() == 0.0

    def test_capacity_error(self):
        rng = np.random.default_rng(6)
        preds = make_preds(rng, 3, grad=False)
        with pytest.raises(ValueError, match="capacity"):
            L.hungarian_loss(preds, np.zeros((4, 4)), np.zeros((4, 6)),
                             Assignment(pairs=(), total_cost=0.0), 4, 3)

    def test_gradient_at_fixed_assignment(self):
        rng = np.random.default_rng(7)
        n, m, c = 5, 2, 4
        gt_boxes = rng.uniform(0.3, 0.7, size=(m, 4))
        gt_feats = rng.normal(size=(m, c))
        assignment = Assignment(pairs=((0, 1), (1, 3)), total_cost=0.0)
        preds = make_preds(rng, n, c=c)

        def loss_fn(logits, boxes, feats):
            p = Preds(logits, boxes, feats)
            return L.hungarian_loss(p, gt_boxes, gt_feats, assignment, m, n).total

        err = T.finite_diff_check(loss_fn, preds.class_logits, preds.boxes, preds.rec_features)
        assert err < 1e-4

    def test_replacing_matched_prediction_with_gt_never_increases(self):
        rng = np.random.default_rng(8)
        n, m, c = 6, 3, 4
        for _ in range(20):
            preds = make_preds(rng, n, c=c, grad=False)
            gt_boxes = rng.uniform(0.3, 0.7, size=(m, 4))
            gt_feats = rng.normal(size=(m, c))
            cost = build_cost(preds.class_logits.data, preds.boxes.data, gt_boxes)
            assignment = hungarian(cost)
            base = L.hungarian_loss(preds, gt_boxes, gt_feats, assignment, m, n).total.item()
            for g, q in assignment.pairs:
                logits = preds.class_logits.data.copy()
                boxes = preds.boxes.data.copy()
                feats = preds.rec_features.data.copy()
                logits[q] = [-40.0, 40.0]
                boxes[q] = gt_boxes[g]
                feats[q] = gt_feats[g]
                swapped = Preds(Tensor(logits), Tensor(boxes), Tensor(feats))
                redone = L.hungarian_loss(swapped, gt_boxes, gt_feats, assignment, m, n).total.item()
                assert redone <= base + 1e-12


class TestDetectionLoss:
    def test_matched_and_unmatched_terms(self):
        rng = np.random.default_rng(9)
        n, k = 4, 3  # 3 real classes, class index 3 = no object
        preds = Preds(
            Tensor(np.zeros((n, k + 1))),
            Tensor(rng.uniform(0.3, 0.7, size=(n, 4))),
            Tensor(np.zeros((n, 1))),
        )
        gt_boxes = preds.boxes.data[1:2].copy()
        assignment = Assignment(pairs=((0, 1),), total_cost=0.0)
        out = L.detection_loss(preds, gt_boxes, [2], assignment, no_object_class=k)
        expected_cls = math.log(k + 1) + 3 * 0.1 * math.log(k + 1)
        assert np.isclose(out.cls.item(), expected_cls, atol=1e-10)
        assert np.isclose(out.box.item(), 0.0, atol=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(10)
        n, k = 5, 3
        gt_boxes = rng.uniform(0.3, 0.7, size=(2, 4))
        assignment = Assignment(pairs=((0, 0), (1, 4)), total_cost=0.0)
        logits = Tensor(rng.normal(size=(n, k + 1)), requires_grad=True)
        boxes = Tensor(rng.uniform(0.3, 0.7, size=(n, 4)), requires_grad=True)

        def loss_fn(lg, bx):
            p = Preds(lg, bx, Tensor(np.zeros((n, 1))))
            return L.detection_loss(p, gt_boxes, [0, 2], assignment, no_object_class=k).total

        assert T.finite_diff_check(loss_fn, logits, boxes) < 1e-4


class TestStackBreakdowns:
    def test_sums_components_and_keeps_layers(self):
        rng = np.random.default_rng(11)
        n, m = 4, 1
        gt_boxes = rng.uniform(0.3, 0.7, size=(m, 4))
        gt_feats = rng.normal(size=(m, 3))
        assignment = Assignment(pairs=((0, 0),), total_cost=0.0)
        pieces = [
            L.hungarian_loss(make_preds(rng, n, c=3, grad=False), gt_boxes, gt_feats,
                             assignment, m, n)
            for _ in range(3)
        ]
        combined = L.stack_breakdowns(pieces)
        assert len(combined.layers) == 3
        assert np.isclose(
            combined.total.item(), sum(p.total.item() for p in pieces), atol=1e-12
        )
