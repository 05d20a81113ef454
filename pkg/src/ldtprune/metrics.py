"""Detection decoding, greedy NMS and mean average precision."""

import numpy as np

from .data import box_iou
from .errors import EvalError, ShapeError


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def decode_detections(head, strides, score_thresh=0.05, nms_iou=0.5):
    """Decode one image's head outputs into (bbox, class, score) triples.

    ``head`` is a list over scales of {"cls": [G,h,w], "box": [4,h,w]}
    numpy arrays.  Output order is deterministic: score descending, ties by
    (scale, linear cell index, class).
    """
    if not (0.0 < score_thresh < 1.0 and 0.0 < nms_iou < 1.0):
        raise ShapeError("thresholds must lie in (0,1)")
    cands = []
    for si, stride in enumerate(strides):
        scores = _sigmoid(np.asarray(head[si]["cls"]))
        box = np.asarray(head[si]["box"], dtype=np.float64)
        g, h, w = scores.shape
        gs, ys, xs = np.nonzero(scores > score_thresh)
        for gg, yy, xx in zip(gs, ys, xs):
            cx = (xx + 0.5) * stride
            cy = (yy + 0.5) * stride
            l, t, r, b = box[:, yy, xx] * stride
            bb = (cx - l, cy - t, cx + r, cy + b)
            cands.append(
                (bb, int(gg), float(scores[gg, yy, xx]),
                 (si, int(yy) * w + int(xx), int(gg)))
            )
    cands.sort(key=lambda c: (-c[2], c[3]))
    kept = []
    suppressed = [False] * len(cands)
    for i, (bb, gg, sc, _k) in enumerate(cands):
        if suppressed[i]:
            continue
        kept.append((bb, gg, sc))
        for j in range(i + 1, len(cands)):
            if suppressed[j] or cands[j][1] != gg:
                continue
            if box_iou(bb, cands[j][0]) > nms_iou:
                suppressed[j] = True
    return kept


def average_precision_101(matches, num_gt):
    """AP by 101-point interpolation from score-ordered match flags."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum([1.0 if m else 0.0 for m in matches])
    fp = np.cumsum([0.0 if m else 1.0 for m in matches])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def evaluate_map(predictions, ground_truth, iou_thresh=0.5):
    """mAP plus per-class AP.

    ``predictions``: per image, a list of (bbox, class, score);
    ``ground_truth``: per image, a list of (x1,y1,x2,y2,class).  Classes are
    averaged over the classes present in the ground truth.
    """
    gt_classes = sorted({g[4] for per_img in ground_truth for g in per_img})
    if not gt_classes:
        raise EvalError("no ground truth: mAP undefined")
    per_class = {}
    for cls in gt_classes:
        dets = []  # (score, image idx, in-image order, bbox)
        for ii, preds in enumerate(predictions):
            for order, (bb, g, sc) in enumerate(preds):
                if g == cls:
                    dets.append((sc, ii, order, bb))
        dets.sort(key=lambda d: (-d[0], d[1], d[2]))
        gts = {
            ii: [g[:4] for g in per_img if g[4] == cls]
            for ii, per_img in enumerate(ground_truth)
        }
        num_gt = sum(len(v) for v in gts.values())
        used = {ii: [False] * len(v) for ii, v in gts.items()}
        matches = []
        for sc, ii, _order, bb in dets:
            best_iou, best_j = 0.0, -1
            for j, gbox in enumerate(gts.get(ii, [])):
                if used[ii][j]:
                    continue
                iou = box_iou(bb, gbox)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_thresh:
                used[ii][best_j] = True
                matches.append(True)
            else:
                matches.append(False)
        per_class[cls] = average_precision_101(matches, num_gt)
    mean_ap = float(np.mean([per_class[c] for c in gt_classes]))
    return mean_ap, per_class
