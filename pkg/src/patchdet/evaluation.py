"""Detection metrics, curve emission, and one-shot patch localization.

Detections are (class_index, confidence, box) triples per image with boxes in
normalized (cx, cy, w, h); ground truths are (class_index, box) pairs. AP
follows the greedy-matching, 101-point interpolation convention with IoU
thresholds 0.50:0.05:0.95, no NMS anywhere.
"""

import os
from dataclasses import dataclass

import numpy as np

from .geometry import iou_np, xyxy_np
from .pretext import PretextSample

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.50, 0.95, 10), 2))
LOCATE_CONFIDENCE = 0.9
_RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class ApReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict  # class_index -> (ap, ap50, ap75)


def _class_ap(dets, gt_boxes_by_image, n_gt, iou_threshold):
    """AP for one class. dets: (image_idx, confidence, box) triples."""
    if n_gt == 0:
        return None
    if not dets:
        return 0.0
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i][1], dets[i][0], i))
    matched = {img: np.zeros(len(boxes), dtype=bool)
               for img, boxes in gt_boxes_by_image.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = dets[i]
        boxes = gt_boxes_by_image.get(img)
        if boxes is None or not len(boxes):
            continue
        ious = iou_np(xyxy_np(np.asarray(box))[None, :], xyxy_np(boxes))
        ious = np.where(matched[img], -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            tp[rank] = 1.0
            matched[img][best] = True
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(order) + 1)
    recall = cum_tp / n_gt
    ap = 0.0
    for r in _RECALL_GRID:
        at_least = precision[recall >= r - 1e-12]
        ap += at_least.max() if len(at_least) else 0.0
    return ap / len(_RECALL_GRID)


def _group_by_class(results, ground_truths):
    dets_by_class = {}
    gts_by_class = {}
    counts = {}
    for img, gts in enumerate(ground_truths):
        for cls, box in gts:
            gts_by_class.setdefault(cls, {}).setdefault(img, []).append(box)
            counts[cls] = counts.get(cls, 0) + 1
    for img, dets in enumerate(results):
        for cls, conf, box in dets:
            dets_by_class.setdefault(cls, []).append((img, conf, box))
    boxed = {cls: {img: np.asarray(v, dtype=np.float64)
                   for img, v in per_img.items()}
             for cls, per_img in gts_by_class.items()}
    return dets_by_class, boxed, counts


def average_precision(results, ground_truths, iou_threshold):
    """Per-class AP at one IoU threshold; classes without GT are excluded."""
    dets_by_class, gts_by_class, counts = _group_by_class(results, ground_truths)
    out = {}
    for cls, n_gt in counts.items():
        out[cls] = _class_ap(dets_by_class.get(cls, []),
                             gts_by_class.get(cls, {}), n_gt, iou_threshold)
    return out


def ap_report(results, ground_truths, thresholds=COCO_THRESHOLDS):
    """COCO-style AP (mean over thresholds), AP50 and AP75, per class and overall."""
    per_threshold = {t: average_precision(results, ground_truths, t)
                     for t in thresholds}
    classes = sorted({c for aps in per_threshold.values() for c in aps})
    per_class = {}
    for c in classes:
        series = [per_threshold[t][c] for t in thresholds]
        per_class[c] = (float(np.mean(series)),
                        per_threshold[0.5][c], per_threshold[0.75][c])
    if classes:
        ap, ap50, ap75 = (float(np.mean([per_class[c][i] for c in classes]))
                          for i in range(3))
    else:
        ap = ap50 = ap75 = 0.0
    return ApReport(ap=ap, ap50=ap50, ap75=ap75, per_class=per_class)


def _softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def detections_from_predictions(preds, k_classes):
    """All queries as detections: argmax real class with its probability."""
    probs = _softmax_rows(preds.class_logits.data)[:, :k_classes]
    boxes = preds.boxes.data
    out = []
    for q in range(probs.shape[0]):
        cls = int(np.argmax(probs[q]))
        out.append((cls, float(probs[q, cls]), boxes[q].copy()))
    return out


def evaluate_detector(model, samples):
    """AP report of a detection-mode model over DetectionSamples."""
    results, gts = [], []
    for s in samples:
        preds = model.forward_detect(s.image)[-1]
        results.append(detections_from_predictions(preds, model.config.k_classes))
        gts.append([(cls, np.asarray(box, dtype=np.float64))
                    for cls, box in s.objects])
    return ap_report(results, gts)


def locate(model, image, query_patches, conf_threshold=LOCATE_CONFIDENCE):
    """One-shot localization: report the best confident box per patch group.

    Returns (patch_index, confidence, box) rows; patches whose group never
    clears the threshold are omitted.
    """
    m = len(query_patches)
    if m == 0:
        return []
    sample = PretextSample(image=image, patches=list(query_patches),
                           gt_boxes=np.zeros((m, 4)),
                           dropped=np.zeros(m, dtype=bool), seed=0)
    out = model.forward_pretrain(sample)
    pred = out.preds[-1]
    match_prob = _softmax_rows(pred.class_logits.data)[:, 1]
    rows = []
    for k in range(m):
        queries = np.flatnonzero(out.groups == k)
        best = queries[int(np.argmax(match_prob[queries]))]
        if match_prob[best] > conf_threshold:
            rows.append((k, float(match_prob[best]), pred.boxes.data[best].copy()))
    return rows


def write_locate_report(path, rows):
    with open(path, "w") as f:
        for k, conf, box in rows:
            cx, cy, w, h = box
            f.write(f"{k} {conf:.6f} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n")


# ---------------------------------------------------------------------------
# curve records: (epoch, split, metric, value) rows, CSV on disk

CURVE_HEADER = "epoch,split,metric,value"


def write_curves(path, records):
    with open(path, "w") as f:
        f.write(CURVE_HEADER + "\n")
        for epoch, split, metric, value in records:
            f.write(f"{epoch},{split},{metric},{value:.6f}\n")


def read_curves(path):
    records = []
    with open(path) as f:
        header = f.readline().strip()
        if header != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected curve header {header!r}")
        for line in f:
            if not line.strip():
                continue
            epoch, split, metric, value = line.strip().split(",")
            records.append((int(epoch), split, metric, float(value)))
    return records


def paired_deltas(records_a, records_b):
    """Rows (epoch, split, metric, a, b, b-a) for keys present in both runs."""
    index_a = {(e, s, m): v for e, s, m, v in records_a}
    rows = []
    for e, s, m, vb in records_b:
        va = index_a.get((e, s, m))
        if va is not None:
            rows.append((e, s, m, va, vb, vb - va))
    return rows


def first_epoch_reaching(records, metric, threshold, split="val"):
    """Earliest epoch whose record meets the threshold, or None."""
    hits = [e for e, s, m, v in records
            if s == split and m == metric and v >= threshold]
    return min(hits) if hits else None


def emit_curves(runs, out_dir, pairs=()):
    """Per-run CSVs plus paired-delta CSVs; missing runs listed, not fabricated.

    runs: name -> records; pairs: (name_a, name_b, label) comparisons.
    Returns the summary lines written to summary.txt.
    """
    os.makedirs(out_dir, exist_ok=True)
    summary = []
    for name, records in sorted(runs.items()):
        write_curves(os.path.join(out_dir, f"{name}.csv"), records)
        summary.append(f"run {name}: {len(records)} records")
    for name_a, name_b, label in pairs:
        missing = [n for n in (name_a, name_b) if n not in runs]
        if missing:
            summary.append(f"comparison {label}: absent {' '.join(missing)}")
            continue
        rows = paired_deltas(runs[name_a], runs[name_b])
        with open(os.path.join(out_dir, f"{label}.csv"), "w") as f:
            f.write(f"epoch,split,metric,{name_a},{name_b},delta\n")
            for e, s, m, va, vb, d in rows:
                f.write(f"{e},{s},{m},{va:.6f},{vb:.6f},{d:.6f}\n")
        summary.append(f"comparison {label}: {len(rows)} matched records")
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write("".join(line + "\n" for line in summary))
    return summary
