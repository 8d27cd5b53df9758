"""Detection metrics: pixel IoU, instance detection probability with the
3-pixel centroid rule, false alarms per megapixel, threshold-swept ROC,
and local-SNR subset filtering.

IoU and Fa accumulate numerators/denominators over a whole test set;
Pd accumulates instance counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EIGHT_CONN = np.ones((3, 3), dtype=int)
CENTROID_RADIUS = 3.0


class MetricError(ValueError):
    pass


def _check_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


@dataclass
class Instance:
    pixels: np.ndarray  # (k, 2) row/col coordinates
    centroid: tuple  # (row, col), unweighted mean


def connected_components(mask):
    """8-connected components, ordered by top-left-most pixel."""
    mask = np.asarray(mask).astype(bool)
    labels, count = ndimage.label(mask, structure=EIGHT_CONN)
    comps = []
    for lab in range(1, count + 1):
        rows, cols = np.nonzero(labels == lab)
        comps.append(
            Instance(
                pixels=np.stack([rows, cols], axis=1),
                centroid=(float(rows.mean()), float(cols.mean())),
            )
        )
    comps.sort(key=lambda c: (c.pixels[:, 0].min(), c.pixels[c.pixels[:, 0].argmin(), 1]))
    return comps


def iou_counts(pred, gt):
    pred, gt = _check_pair(pred, gt)
    inter = int(np.logical_and(pred, gt).sum())
    union = int(pred.sum()) + int(gt.sum()) - inter
    return inter, union


def iou(preds, gts):
    """Set-level IoU; both-empty union defined as 1."""
    preds, gts = _as_lists(preds, gts)
    inter = union = 0
    for p, g in zip(preds, gts):
        i, u = iou_counts(p, g)
        inter += i
        union += u
    return 1.0 if union == 0 else inter / union


def pd_counts(pred, gt):
    """(detected, total) ground-truth instances for one mask pair."""
    pred, gt = _check_pair(pred, gt)
    gt_comps = connected_components(gt)
    pred_centroids = [c.centroid for c in connected_components(pred)]
    detected = 0
    for gc in gt_comps:
        if any(
            np.hypot(gc.centroid[0] - pc[0], gc.centroid[1] - pc[1])
            <= CENTROID_RADIUS
            for pc in pred_centroids
        ):
            detected += 1
    return detected, len(gt_comps)


def pd(preds, gts):
    preds, gts = _as_lists(preds, gts)
    det = tot = 0
    for p, g in zip(preds, gts):
        d, t = pd_counts(p, g)
        det += d
        tot += t
    return 1.0 if tot == 0 else det / tot


def fa_counts(pred, gt):
    pred, gt = _check_pair(pred, gt)
    false_pos = int(np.logical_and(pred, ~gt).sum())
    return false_pos, pred.size


def fa(preds, gts):
    """False-alarm pixels per megapixel over the set."""
    preds, gts = _as_lists(preds, gts)
    fp = total = 0
    for p, g in zip(preds, gts):
        f, t = fa_counts(p, g)
        fp += f
        total += t
    return 1e6 * fp / total if total else 0.0


def roc(conf_maps, gts, thresholds=None):
    """Pooled pixel-level (fpr, tpr) per threshold, binarizing at >= t."""
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 101)
    conf_maps = [np.asarray(m, dtype=np.float64).squeeze() for m in conf_maps]
    gts = [np.asarray(g).astype(bool) for g in gts]
    if len(conf_maps) != len(gts):
        raise MetricError(f"{len(conf_maps)} maps vs {len(gts)} masks")
    for m, g in zip(conf_maps, gts):
        if m.shape != g.shape:
            raise MetricError(f"map {m.shape} vs mask {g.shape}")
    points = []
    for t in thresholds:
        tp = fn = fp = tn = 0
        for m, g in zip(conf_maps, gts):
            p = m >= t
            tp += int(np.logical_and(p, g).sum())
            fn += int(np.logical_and(~p, g).sum())
            fp += int(np.logical_and(p, ~g).sum())
            tn += int(np.logical_and(~p, ~g).sum())
        tpr = tp / (tp + fn) if tp + fn else 0.0
        fpr = fp / (tn + fp) if tn + fp else 0.0
        points.append((fpr, tpr))
    return points


def snr_of_target(image, component, gt_mask, ring=10):
    """(target mean - background mean) / background std.

    Background is the ring-dilated bounding box of the component minus
    every ground-truth pixel.
    """
    image = np.asarray(image, dtype=np.float64)
    gt_mask = np.asarray(gt_mask).astype(bool)
    px = component.pixels
    if px.size == 0:
        raise MetricError("empty component")
    r0, c0 = px.min(axis=0)
    r1, c1 = px.max(axis=0)
    rr0 = max(0, r0 - ring)
    cc0 = max(0, c0 - ring)
    rr1 = min(image.shape[0], r1 + ring + 1)
    cc1 = min(image.shape[1], c1 + ring + 1)
    box = np.zeros_like(gt_mask)
    box[rr0:rr1, cc0:cc1] = True
    bg = np.logical_and(box, ~gt_mask)
    if not bg.any():
        return None  # degenerate ring; caller excludes the image
    mu_t = image[px[:, 0], px[:, 1]].mean()
    mu_b = image[bg].mean()
    sigma_b = max(float(image[bg].std()), 1e-6)
    return float((mu_t - mu_b) / sigma_b)


def image_snr(image, gt_mask, ring=10):
    """Min over the image's targets; None when any ring is degenerate."""
    comps = connected_components(gt_mask)
    if not comps:
        return None
    values = []
    for c in comps:
        v = snr_of_target(image, c, gt_mask, ring=ring)
        if v is None:
            return None
        values.append(v)
    return min(values)


def snr_subset(images, gt_masks, threshold, ring=10):
    """Indices of images whose (defined) SNR is below the threshold."""
    idx = []
    for i, (im, g) in enumerate(zip(images, gt_masks)):
        v = image_snr(im, g, ring=ring)
        if v is not None and v < threshold:
            idx.append(i)
    return idx


@dataclass
class MetricsReport:
    iou: float
    pd: float
    fa: float
    roc: list = field(default_factory=list)
    per_image: list = field(default_factory=list)

    def table(self):
        lines = [
            f"{'metric':<10}{'value':>12}",
            f"{'iou':<10}{self.iou:>12.6f}",
            f"{'pd':<10}{self.pd:>12.6f}",
            f"{'fa':<10}{self.fa:>12.4f}",
        ]
        return "\n".join(lines)

    def metrics_csv(self):
        return "metric,value\n" + "".join(
            f"{k},{v}\n" for k, v in (("iou", self.iou), ("pd", self.pd), ("fa", self.fa))
        )

    def roc_csv(self):
        return "fpr,tpr\n" + "".join(f"{f},{t}\n" for f, t in self.roc)


def evaluate(preds, gts, conf_maps=None):
    preds, gts = _as_lists(preds, gts)
    per_image = []
    for p, g in zip(preds, gts):
        i, u = iou_counts(p, g)
        d, t = pd_counts(p, g)
        f, n = fa_counts(p, g)
        per_image.append(
            {
                "iou": 1.0 if u == 0 else i / u,
                "detected": d,
                "targets": t,
                "false_pixels": f,
                "pixels": n,
            }
        )
    report = MetricsReport(
        iou=iou(preds, gts),
        pd=pd(preds, gts),
        fa=fa(preds, gts),
        per_image=per_image,
    )
    if conf_maps is not None:
        report.roc = roc(conf_maps, gts)
    return report


def _as_lists(preds, gts):
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    return preds, gts
