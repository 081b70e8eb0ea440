"""Evaluation protocols: point-localization AP with pixel tolerance,
pixel-ranking saliency AP, center baseline, and inter-phase prediction
distance.

AP convention (both protocols): rank entries by confidence descending,
treat ties as entering together, and accumulate precision * recall-step
over the tie groups; recall's denominator is the total number of
positives. This equals the area under the all-points PR curve.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .ops import bilinear_resize


@dataclass(frozen=True)
class PointPrediction:
    image_id: int
    class_id: int
    location: tuple   # (row, col) in image pixels
    confidence: float


@dataclass
class PRCurve:
    points: list  # ordered (recall, precision)
    ap: float


def average_precision(confidences, relevances, total_positives=None) -> PRCurve:
    """AP of a confidence-ranked binary-relevance list.

    ``total_positives`` overrides the recall denominator when some
    positives have no entry in the list (missed detections).
    """
    conf = np.asarray(confidences, dtype=np.float64)
    rel = np.asarray(relevances, dtype=bool)
    if conf.shape != rel.shape or conf.ndim != 1:
        raise ValueError(f"AP: got shapes {conf.shape} and {rel.shape}")
    pos = int(rel.sum()) if total_positives is None else int(total_positives)
    if pos == 0:
        return PRCurve(points=[], ap=0.0)
    order = np.argsort(-conf, kind="stable")
    conf, rel = conf[order], rel[order]
    # tie groups share one threshold and enter the curve together
    boundaries = np.flatnonzero(np.diff(conf)) + 1
    ends = np.append(boundaries, conf.size)
    tp = np.cumsum(rel)[ends - 1]
    ranks = ends.astype(np.float64)
    precision = tp / ranks
    recall = tp / pos
    ap = float(np.sum(np.diff(np.concatenate(([0.0], recall))) * precision))
    return PRCurve(points=list(zip(recall.tolist(), precision.tolist())), ap=ap)


# ---------------------------------------------------------------------------
# point localization

def predict_point(heatmap, image_h, image_w):
    """Peak of the bilinearly upscaled map; row-major first index on ties."""
    up = bilinear_resize(np.asarray(heatmap, dtype=np.float64), image_h, image_w)
    flat = int(np.argmax(up))
    return (flat // image_w, flat % image_w), float(up.max())


def _inside_dilated(point, box, tolerance):
    r, c = point
    r0, c0, r1, c1 = box
    return (r0 - tolerance <= r <= r1 + tolerance
            and c0 - tolerance <= c <= c1 + tolerance)


def localization_ap(predictions, gt_boxes, tolerance=18):
    """Per-class AP and mAP of point predictions.

    ``gt_boxes`` maps image_id -> list of (class_id, box). A prediction is
    correct iff its class is present in the image and the point falls in
    any same-class box dilated by ``tolerance`` on all sides (inclusive).
    Present-class misses stay unrecalled positives; absent-class
    predictions are plain false positives.
    """
    seen = set()
    for p in predictions:
        key = (p.image_id, p.class_id)
        if key in seen:
            raise ValueError(f"duplicate prediction for (image, class) {key}")
        seen.add(key)

    class_ids = sorted({c for boxes in gt_boxes.values() for c, _ in boxes}
                       | {p.class_id for p in predictions})
    per_class = {}
    for c in class_ids:
        positives = sum(1 for boxes in gt_boxes.values()
                        if any(cc == c for cc, _ in boxes))
        if positives == 0:
            continue
        preds = [p for p in predictions if p.class_id == c]
        conf = [p.confidence for p in preds]
        rel = []
        for p in preds:
            boxes = [b for cc, b in gt_boxes.get(p.image_id, []) if cc == c]
            rel.append(any(_inside_dilated(p.location, b, tolerance) for b in boxes))
        curve = average_precision(np.array(conf), np.array(rel), positives) \
            if preds else PRCurve([], 0.0)
        per_class[c] = curve.ap
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def center_baseline_predictions(image_ids, image_h, image_w, confidences):
    """One prediction per (image, class) at the image center.

    ``confidences`` maps (image_id, class_id) -> confidence (class priors
    or model probabilities, caller's choice).
    """
    center = (image_h // 2, image_w // 2)
    return [PointPrediction(image_id=i, class_id=c, location=center,
                            confidence=conf)
            for (i, c), conf in confidences.items() if i in set(image_ids)]


# ---------------------------------------------------------------------------
# per-class saliency

def saliency_ap(heatmap, gt_mask):
    """Pixel-ranking PR of one heat map against a binary ground-truth mask."""
    h = np.asarray(heatmap, dtype=np.float64)
    m = np.asarray(gt_mask).astype(bool)
    if h.shape != m.shape:
        raise ValueError(f"saliency_ap: map shape {h.shape} != mask shape {m.shape}")
    if not m.any():
        warnings.warn("saliency_ap: empty ground-truth mask; pair skipped")
        return None
    return average_precision(h.ravel(), m.ravel())


def corpus_saliency_ap(pairs):
    """Pooled AP over (heatmap, gt_mask) pairs for all present classes."""
    confs, rels = [], []
    for heatmap, gt_mask in pairs:
        m = np.asarray(gt_mask).astype(bool)
        if not m.any():
            warnings.warn("corpus_saliency_ap: empty ground-truth mask; pair skipped")
            continue
        confs.append(np.asarray(heatmap, dtype=np.float64).ravel())
        rels.append(m.ravel())
    if not confs:
        raise ValueError("corpus_saliency_ap: no valid pairs")
    return average_precision(np.concatenate(confs), np.concatenate(rels))


# ---------------------------------------------------------------------------
# inter-phase distance

def mean_pairwise_distance(preds_a, preds_b):
    """Mean Euclidean pixel distance over matched (image, class) pairs."""
    index_b = {(p.image_id, p.class_id): p for p in preds_b}
    dists = []
    for p in preds_a:
        q = index_b.get((p.image_id, p.class_id))
        if q is not None:
            dr = p.location[0] - q.location[0]
            dc = p.location[1] - q.location[1]
            dists.append(float(np.hypot(dr, dc)))
    if not dists:
        raise ValueError("mean_pairwise_distance: no matched (image, class) pairs")
    return float(np.mean(dists))
