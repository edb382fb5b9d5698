"""Set-prediction losses: balanced classification, box regression, and
patch-feature reconstruction, summed over an optimal assignment.

`preds` arguments are duck-typed: anything with class_logits [N x K],
boxes [N x 4] and rec_features [N x C] tensors works.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import box_loss
from .tensor import Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    cls: Tensor
    box: Tensor
    rec: Tensor
    layers: list = field(default_factory=list)

    def values(self):
        return {
            "total": self.total.item(),
            "cls": self.cls.item(),
            "box": self.box.item(),
            "rec": self.rec.item(),
        }


def rec_loss(p, p_hat):
    """Squared distance between unit-normalized feature vectors, range [0, 4].

    Accepts single vectors or row batches; reduces over the last axis only.
    """
    diff = T.l2_normalize(p) - T.l2_normalize(p_hat)
    return T.reduce_sum(diff * diff, axis=-1)


def cls_loss(logits, target, weight):
    """Weighted cross entropy for a single query's class logits."""
    if weight <= 0:
        raise ValueError(f"class weight must be positive, got {weight}")
    return T.scale(T.cross_entropy(logits, target), weight)


def hungarian_loss(preds, gt_boxes, gt_features, assignment, num_patches, num_queries,
                   use_reconstruction=True):
    """Pretext loss over all queries at a fixed assignment.

    Matched queries (class 1, weight 1) pay classification, box and, when
    enabled, reconstruction terms; every other query pays only the class-0
    cross entropy with balance weight num_patches / num_queries.
    """
    n = preds.class_logits.shape[0]
    if n != num_queries:
        raise ValueError(f"prediction set has {n} queries, expected {num_queries}")
    if num_patches > num_queries:
        raise ValueError(f"capacity exceeded: {num_patches} patches for {num_queries} queries")

    gt_boxes = _const(gt_boxes).data.reshape(-1, 4)
    matched_queries = np.array([q for _, q in assignment.pairs], dtype=np.intp)
    matched_gts = np.array([g for g, _ in assignment.pairs], dtype=np.intp)

    targets = np.zeros(n, dtype=np.intp)
    targets[matched_queries] = 1
    weights = np.full(n, num_patches / num_queries)
    weights[matched_queries] = 1.0

    log_probs = T.log_softmax(preds.class_logits)
    picked = T.take_per_row(log_probs, targets)
    cls = T.neg(T.reduce_sum(T.mul(picked, Tensor(weights))))

    if len(matched_queries) > 0:
        pred_boxes = preds.boxes[matched_queries]
        box = T.reduce_sum(box_loss(pred_boxes, Tensor(gt_boxes[matched_gts])))
    else:
        box = Tensor(0.0)

    if use_reconstruction and len(matched_queries) > 0:
        feat_targets = _const(gt_features).data[matched_gts]
        pred_feats = preds.rec_features[matched_queries]
        rec = T.reduce_sum(rec_loss(Tensor(feat_targets), pred_feats))
    else:
        rec = Tensor(0.0)

    total = cls + box + rec
    return LossBreakdown(total=total, cls=cls, box=box, rec=rec)


def detection_loss(preds, gt_boxes, gt_classes, assignment, no_object_class,
                   no_object_weight=0.1):
    """Multi-class fine-tuning loss: matched queries pay their class and box
    terms, the rest pay a down-weighted "no object" cross entropy."""
    n = preds.class_logits.shape[0]
    gt_boxes = _const(gt_boxes).data.reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.intp)

    matched_queries = np.array([q for _, q in assignment.pairs], dtype=np.intp)
    matched_gts = np.array([g for g, _ in assignment.pairs], dtype=np.intp)

    targets = np.full(n, no_object_class, dtype=np.intp)
    targets[matched_queries] = gt_classes[matched_gts]
    weights = np.full(n, no_object_weight)
    weights[matched_queries] = 1.0

    log_probs = T.log_softmax(preds.class_logits)
    picked = T.take_per_row(log_probs, targets)
    cls = T.neg(T.reduce_sum(T.mul(picked, Tensor(weights))))

    if len(matched_queries) > 0:
        pred_boxes = preds.boxes[matched_queries]
        box = T.reduce_sum(box_loss(pred_boxes, Tensor(gt_boxes[matched_gts])))
    else:
        box = Tensor(0.0)

    rec = Tensor(0.0)
    total = cls + box
    return LossBreakdown(total=total, cls=cls, box=box, rec=rec)


def stack_breakdowns(per_layer):
    """Combine per-decoder-layer breakdowns into one auxiliary-loss total."""
    total = per_layer[0].total
    cls = per_layer[0].cls
    box = per_layer[0].box
    rec = per_layer[0].rec
    for piece in per_layer[1:]:
        total = total + piece.total
        cls = cls + piece.cls
        box = box + piece.box
        rec = rec + piece.rec
    return LossBreakdown(total=total, cls=cls, box=box, rec=rec, layers=list(per_layer))


def scale_breakdown(breakdown, factor):
    """Multiply every component by a constant, e.g. for batch averaging."""
    return LossBreakdown(
        total=T.scale(breakdown.total, factor),
        cls=T.scale(breakdown.cls, factor),
        box=T.scale(breakdown.box, factor),
        rec=T.scale(breakdown.rec, factor),
        layers=breakdown.layers,
    )


def _const(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
