"""Bipartite matching between ground truths and prediction slots.

The match cost for ground truth i and query j is the negated probability of
the ground truth's class plus the box regression cost. Matching happens off
the gradient tape; gradients only flow through the loss evaluated at the
returned assignment.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import pairwise_box_cost

MAX_BRUTE_FORCE_ROWS = 8


@dataclass(frozen=True)
class Assignment:
    """Injective map from ground-truth index to query index."""

    pairs: tuple
    total_cost: float

    @property
    def query_for_gt(self):
        return {g: q for g, q in self.pairs}


def _as_array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def build_cost(class_logits, boxes, gt_boxes, gt_classes=None):
    """G x N cost matrix: -P_j(class_i) + box cost, in plain numpy.

    gt_classes defaults to all ones (the pretext "match" class).
    """
    logits = _as_array(class_logits)
    boxes = _as_array(boxes)
    gt_boxes = _as_array(gt_boxes).reshape(-1, 4)
    n = logits.shape[0]
    g = gt_boxes.shape[0]
    if g > n:
        raise ValueError(f"capacity exceeded: {g} ground truths for {n} queries")
    if gt_classes is None:
        gt_classes = np.ones(g, dtype=np.intp)
    else:
        gt_classes = np.asarray(gt_classes, dtype=np.intp)

    shifted = logits - logits.max(axis=-1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=-1, keepdims=True)

    cost = -probs[:, gt_classes].T + pairwise_box_cost(gt_boxes, boxes)
    return cost


def _validate(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    g, n = cost.shape
    if g > n:
        raise ValueError(f"capacity exceeded: {g} rows for {n} columns")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def hungarian(cost):
    """Minimum-cost assignment by shortest augmenting paths.

    Rows are inserted in order and ties in the path search break toward the
    lowest column index, so results are reproducible.
    """
    cost = _validate(cost)
    g, n = cost.shape

    inf = np.inf
    u = np.zeros(g + 1)
    v = np.zeros(n + 1)
    col_to_row = np.zeros(n + 1, dtype=np.intp)  # 0 = unassigned
    way = np.zeros(n + 1, dtype=np.intp)

    for i in range(1, g + 1):
        col_to_row[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_to_row[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_to_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_to_row[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            col_to_row[j0] = col_to_row[j1]
            j0 = j1

    pairs = sorted((col_to_row[j] - 1, j - 1) for j in range(1, n + 1) if col_to_row[j] != 0)
    total = _total_cost(cost, pairs)
    return Assignment(pairs=tuple(pairs), total_cost=total)


def brute_force_match(cost):
    """Exhaustive minimum over all injective maps; test oracle for hungarian."""
    from itertools import permutations

    cost = _validate(cost)
    g, n = cost.shape
    if g > MAX_BRUTE_FORCE_ROWS:
        raise ValueError(f"capacity exceeded: brute force limited to {MAX_BRUTE_FORCE_ROWS} rows, got {g}")

    best_total = np.inf
    best_cols = None
    for cols in permutations(range(n), g):
        total = 0.0
        for row, col in enumerate(cols):
            total += cost[row, col]
        if total < best_total:
            best_total = total
            best_cols = cols
    pairs = tuple((row, col) for row, col in enumerate(best_cols))
    return Assignment(pairs=pairs, total_cost=_total_cost(cost, pairs))


def _total_cost(cost, pairs):
    total = 0.0
    for row, col in pairs:
        total += cost[row, col]
    return float(total)
