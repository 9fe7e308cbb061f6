"""Pure numpy implementations of the hot kernels.

These define the reference semantics; the compiled extension in
``_ckernels`` must agree with them bit for bit.
"""

import numpy as np

CUBIC_A = -0.5


def cubic_taps(in_size: int, out_size: int):
    """Source indices ``[out, 4]`` (edge-clamped) and Catmull-Rom weights ``[out, 4]``.

    Output pixel ``o`` samples source coordinate ``(o + 0.5) * in/out - 0.5``
    (pixel centres aligned); taps are at offsets -1, 0, +1, +2 from its floor.
    """
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src)
    t = src - base
    base = base.astype(np.int64)
    idx = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, in_size - 1)
    dist = np.stack([1.0 + t, t, 1.0 - t, 2.0 - t], axis=1)
    return idx, cubic_weight(dist)


def cubic_weight(x):
    a = CUBIC_A
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    near = ((a + 2.0) * x3 - (a + 3.0) * x2) + 1.0
    far = ((a * x3 - 5.0 * a * x2) + 8.0 * a * x) - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _resize_rows(img, idx, w):
    # out[r, o] = p0 + w0*(p-1 - p0) + w2*(p1 - p0) + w3*(p2 - p0); exact on constants
    taps = img[:, idx]
    p0 = taps[:, :, 1]
    out = p0 + w[:, 0] * (taps[:, :, 0] - p0)
    out = out + w[:, 2] * (taps[:, :, 2] - p0)
    out = out + w[:, 3] * (taps[:, :, 3] - p0)
    return out


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of a 2-D float64 image (columns first, then rows)."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    h, w = img.shape
    idx_x, w_x = cubic_taps(w, out_w)
    idx_y, w_y = cubic_taps(h, out_h)
    tmp = _resize_rows(img, idx_x, w_x)
    return np.ascontiguousarray(_resize_rows(tmp.T, idx_y, w_y).T)


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending-score order (stable on ties)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(i)
        for later in range(pos + 1, len(order)):
            if not suppressed[later] and box_iou(boxes[i], boxes[order[later]]) > iou_threshold:
                suppressed[later] = True
    return np.asarray(keep, dtype=np.int64)


def match_detections(pred_boxes, pred_image, gt_boxes, gt_image, iou_threshold: float):
    """Greedy matching of score-sorted predictions to ground truth.

    Each prediction, in the given order, claims the unmatched ground-truth
    box of the same image with the highest IoU, provided that IoU is at
    least ``iou_threshold`` (ties go to the lower index). Returns the matched
    ground-truth index per prediction, ``-1`` for false positives.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    pred_image = np.asarray(pred_image, dtype=np.int64)
    gt_image = np.asarray(gt_image, dtype=np.int64)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    out = np.full(len(pred_boxes), -1, dtype=np.int64)
    for p in range(len(pred_boxes)):
        best, best_iou = -1, -1.0
        for g in range(len(gt_boxes)):
            if taken[g] or gt_image[g] != pred_image[p]:
                continue
            v = box_iou(pred_boxes[p], gt_boxes[g])
            if v >= iou_threshold and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
            out[p] = best
    return out
