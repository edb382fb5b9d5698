"""Box representations, IoU/GIoU, and the box regression loss.

Boxes live in two layouts, both normalized to the unit square:
  cxcywh: center x, center y, width, height (model output, ground truth)
  xyxy:   corners x0, y0, x1, y1 (overlap computation form)

All tensor-path functions accept a trailing axis of 4 and broadcast over
leading axes, so a single box [4] and a batch [G, 4] both work.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor

# L1 and GIoU term weights of the box loss (standard set-prediction defaults).
LAMBDA_L1 = 5.0
LAMBDA_GIOU = 2.0

AREA_FLOOR = 1e-9


def to_xyxy(b):
    """cxcywh -> xyxy."""
    cx, cy = b[..., 0:1], b[..., 1:2]
    w, h = b[..., 2:3], b[..., 3:4]
    half_w, half_h = T.scale(w, 0.5), T.scale(h, 0.5)
    return T.concat([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)


def to_cxcywh(b):
    """xyxy -> cxcywh."""
    x0, y0 = b[..., 0:1], b[..., 1:2]
    x1, y1 = b[..., 2:3], b[..., 3:4]
    return T.concat(
        [T.scale(x0 + x1, 0.5), T.scale(y0 + y1, 0.5), x1 - x0, y1 - y0], axis=-1
    )


def iou(a, b):
    """Intersection over union of xyxy boxes, elementwise over leading axes."""
    inter, union = _inter_union(a, b)
    return inter / T.maximum(union, AREA_FLOOR)


def giou(a, b):
    """Generalized IoU of xyxy boxes: IoU - (enclose - union) / enclose.

    Differentiable; degenerate enclosing boxes fall back to 0 via the area
    floor. Range [-1, 1].
    """
    inter, union = _inter_union(a, b)
    union_safe = T.maximum(union, AREA_FLOOR)
    iou_val = inter / union_safe

    lt = T.minimum(a[..., 0:2], b[..., 0:2])
    rb = T.maximum(a[..., 2:4], b[..., 2:4])
    wh = T.maximum(rb - lt, 0.0)
    enclose = T.maximum(wh[..., 0] * wh[..., 1], AREA_FLOOR)
    return iou_val - (enclose - union_safe) / enclose


def _inter_union(a, b):
    lt = T.maximum(a[..., 0:2], b[..., 0:2])
    rb = T.minimum(a[..., 2:4], b[..., 2:4])
    wh = T.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    return inter, union


def _area(box):
    # negative extents clamp to zero so malformed boxes stay differentiable
    w = T.maximum(box[..., 2] - box[..., 0], 0.0)
    h = T.maximum(box[..., 3] - box[..., 1], 0.0)
    return w * h


def box_loss(pred, gt):
    """L1 + GIoU regression loss between cxcywh boxes.

    Returns one scalar per leading index: LAMBDA_L1 * ||pred - gt||_1 +
    LAMBDA_GIOU * (1 - giou).
    """
    l1 = T.reduce_sum(T.absolute(pred - gt), axis=-1)
    g = giou(to_xyxy(pred), to_xyxy(gt))
    return T.scale(l1, LAMBDA_L1) + T.scale(Tensor(np.ones(g.shape)) - g, LAMBDA_GIOU)


# ---------------------------------------------------------------------------
# plain-numpy twins, used off the gradient tape (matching cost, AP evaluation)


def xyxy_np(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:4] / 2.0
    return np.concatenate([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


def iou_np(a, b):
    inter, union = _inter_union_np(a, b)
    return inter / np.maximum(union, AREA_FLOOR)


def giou_np(a, b):
    inter, union = _inter_union_np(a, b)
    union_safe = np.maximum(union, AREA_FLOOR)
    lt = np.minimum(a[..., 0:2], b[..., 0:2])
    rb = np.maximum(a[..., 2:4], b[..., 2:4])
    wh = np.maximum(rb - lt, 0.0)
    enclose = np.maximum(wh[..., 0] * wh[..., 1], AREA_FLOOR)
    return inter / union_safe - (enclose - union_safe) / enclose


def _inter_union_np(a, b):
    lt = np.maximum(a[..., 0:2], b[..., 0:2])
    rb = np.minimum(a[..., 2:4], b[..., 2:4])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]

    def area(box):
        return np.maximum(box[..., 2] - box[..., 0], 0.0) * np.maximum(
            box[..., 3] - box[..., 1], 0.0
        )

    return inter, area(a) + area(b) - inter


def pairwise_box_cost(gt_cxcywh, pred_cxcywh):
    """G x N matrix of box_loss values, computed in plain numpy."""
    gt = np.asarray(gt_cxcywh, dtype=np.float64)[:, None, :]
    pred = np.asarray(pred_cxcywh, dtype=np.float64)[None, :, :]
    l1 = np.abs(gt - pred).sum(axis=-1)
    g = giou_np(xyxy_np(gt), xyxy_np(pred))
    return LAMBDA_L1 * l1 + LAMBDA_GIOU * (1.0 - g)
