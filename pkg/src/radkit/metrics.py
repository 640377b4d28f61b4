"""Detection and localization metrics.

All metrics operate on raw scores and are invariant under strictly monotone
score transforms. Tie handling is pinned exactly:

* AUROC equals the Mann-Whitney statistic P(pos > neg) + 0.5 * P(tie),
  computed through midranks.
* Average precision uses step interpolation over descending distinct-score
  thresholds, with tied scores processed as a single threshold group.
* F1-max sweeps a threshold over every distinct score (predict positive at
  score >= threshold); equal F1 resolves to the lowest threshold.
* AUPRO averages per-connected-component overlap (8-connectivity) against
  the false-positive rate over anomaly-free pixels, integrated by trapezoid
  over FPR in [0, fpr_limit] and normalized by fpr_limit; thresholds sweep
  all distinct pixel values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .anomaly_map import AnomalyResult
from .errors import ValidationError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype == bool:
        return y
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValidationError("labels must be binary (0/1)")
    return y.astype(bool)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [values.size]])
    for a, b in zip(starts, stops):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0  # average of ranks a+1..b
    return ranks


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via rank sums with midrank tie handling."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1-D")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes present")
    ranks = _midranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_groups(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP at each distinct score threshold, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s_desc = scores[order]
    y_desc = labels[order]
    last_in_group = np.flatnonzero(np.diff(s_desc)) if s_desc.size else np.array([], int)
    ends = np.concatenate([last_in_group, [s_desc.size - 1]])
    tp = np.cumsum(y_desc)[ends]
    fp = np.cumsum(~y_desc)[ends]
    return s_desc[ends], tp.astype(np.float64), fp.astype(np.float64)


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-interpolated AP over descending-score threshold groups."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1-D")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValidationError("average precision needs at least one positive")
    _, tp, fp = _threshold_groups(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def f1_max(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Best F1 over all distinct-score thresholds and the threshold reaching it.

    Prediction is positive at score >= threshold; F1 ties resolve to the
    lowest threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1-D")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValidationError("F1 needs at least one positive")
    thresholds, tp, fp = _threshold_groups(s, y)
    fn = n_pos - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    # thresholds are descending; picking the last maximum gives the lowest one
    best = f1.size - 1 - int(np.argmax(f1[::-1]))
    return float(f1[best]), float(thresholds[best])


def _pro_fpr_curve(
    maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """PRO and FPR evaluated at every distinct pixel value, descending."""
    region_scores: list[np.ndarray] = []
    neg_scores: list[np.ndarray] = []
    for pixel_map, mask in zip(maps, masks):
        arr = np.asarray(pixel_map, dtype=np.float64)
        m = np.asarray(mask, dtype=bool)
        if arr.shape != m.shape:
            raise ValidationError(
                f"map shape {arr.shape} != mask shape {m.shape}"
            )
        labeled, count = ndimage.label(m, structure=EIGHT_CONNECTED)
        for region in range(1, count + 1):
            region_scores.append(np.sort(arr[labeled == region]))
        neg_scores.append(arr[~m])
    if not region_scores:
        raise ValidationError("AUPRO needs at least one anomalous region")
    neg = np.sort(np.concatenate(neg_scores))
    thresholds = np.unique(
        np.concatenate([np.concatenate(region_scores), neg])
    )[::-1]

    overlaps = np.zeros((len(region_scores), thresholds.size))
    for i, rs in enumerate(region_scores):
        # count of region pixels >= threshold
        overlaps[i] = (rs.size - np.searchsorted(rs, thresholds, side="left")) / rs.size
    pro = overlaps.mean(axis=0)
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / max(neg.size, 1)
    return fpr, pro


def _clipped_trapezoid(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    """Trapezoid integral of the (FPR, PRO) polyline over [0, limit] / limit.

    The curve starts at the implicit point (0, 0); a segment crossing
    ``limit`` is cut by linear interpolation.
    """
    xs = np.concatenate([[0.0], fpr])
    ys = np.concatenate([[0.0], pro])
    area = 0.0
    for i in range(1, xs.size):
        x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
        if x1 <= x0:
            continue
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / limit


def aupro(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
) -> float:
    """Area under the per-region-overlap curve up to ``fpr_limit``."""
    if not 0.0 < fpr_limit <= 1.0:
        raise ValidationError(f"fpr_limit {fpr_limit} outside (0, 1]")
    if len(maps) == 0 or len(maps) != len(masks):
        raise ValidationError("need equally many maps and masks, at least one")
    fpr, pro = _pro_fpr_curve(maps, masks)
    return float(_clipped_trapezoid(fpr, pro, fpr_limit))


@dataclass
class MetricBundle:
    image_auroc: float
    image_ap: float
    image_f1max: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1max: float
    aupro: float

    def as_dict(self) -> dict:
        return {
            "image_auroc": self.image_auroc,
            "image_ap": self.image_ap,
            "image_f1max": self.image_f1max,
            "pixel_auroc": self.pixel_auroc,
            "pixel_ap": self.pixel_ap,
            "pixel_f1max": self.pixel_f1max,
            "aupro": self.aupro,
        }


@dataclass
class GroundTruthEntry:
    label: str
    category: str
    mask: Optional[np.ndarray] = None


@dataclass
class EvalReport:
    image_auroc: float
    image_ap: float
    image_f1max: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1max: float
    aupro: float
    per_category: dict[str, MetricBundle] = field(default_factory=dict)
    category_mean: Optional[MetricBundle] = None

    @property
    def pooled(self) -> MetricBundle:
        return MetricBundle(
            self.image_auroc,
            self.image_ap,
            self.image_f1max,
            self.pixel_auroc,
            self.pixel_ap,
            self.pixel_f1max,
            self.aupro,
        )

    def as_dict(self) -> dict:
        return {
            "pooled": self.pooled.as_dict(),
            "per_category": {
                cat: bundle.as_dict() for cat, bundle in sorted(self.per_category.items())
            },
            "category_mean": self.category_mean.as_dict() if self.category_mean else None,
        }

    def to_csv(self) -> str:
        """CSV with the conventional column order:
        I-AUROC,I-AP,I-F1max,P-AUROC,P-AP,P-F1max,AUPRO."""
        lines = ["scope,I-AUROC,I-AP,I-F1max,P-AUROC,P-AP,P-F1max,AUPRO"]

        def row(scope: str, b: MetricBundle) -> str:
            vals = [
                b.image_auroc,
                b.image_ap,
                b.image_f1max,
                b.pixel_auroc,
                b.pixel_ap,
                b.pixel_f1max,
                b.aupro,
            ]
            return scope + "," + ",".join(f"{v:.6f}" for v in vals)

        lines.append(row("pooled", self.pooled))
        if self.category_mean is not None:
            lines.append(row("category_mean", self.category_mean))
        for cat in sorted(self.per_category):
            lines.append(row(cat, self.per_category[cat]))
        return "\n".join(lines) + "\n"


def _bundle(
    results: dict[str, AnomalyResult],
    truth: dict[str, GroundTruthEntry],
    ids: list[str],
    fpr_limit: float,
) -> MetricBundle:
    img_scores = np.array([results[i].image_score for i in ids])
    img_labels = np.array([truth[i].label == "anomalous" for i in ids])

    pixel_scores = []
    pixel_labels = []
    anom_maps = []
    anom_masks = []
    shape = None
    for i in ids:
        pm = np.asarray(results[i].pixel_map, dtype=np.float64)
        if shape is None:
            shape = pm.shape
        elif pm.shape != shape:
            raise ValidationError(
                f"image {i!r}: pixel map shape {pm.shape} != {shape}"
            )
        mask = truth[i].mask
        if truth[i].label == "anomalous":
            if mask is None:
                raise ValidationError(f"missing mask for anomalous image {i!r}")
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != pm.shape:
                raise ValidationError(
                    f"image {i!r}: mask shape {mask.shape} != map shape {pm.shape}"
                )
            anom_maps.append(pm)
            anom_masks.append(mask)
        else:
            mask = np.zeros(pm.shape, dtype=bool)
        pixel_scores.append(pm.ravel())
        pixel_labels.append(mask.ravel())

    px_scores = np.concatenate(pixel_scores)
    px_labels = np.concatenate(pixel_labels)
    return MetricBundle(
        image_auroc=auroc(img_scores, img_labels),
        image_ap=average_precision(img_scores, img_labels),
        image_f1max=f1_max(img_scores, img_labels)[0],
        pixel_auroc=auroc(px_scores, px_labels),
        pixel_ap=average_precision(px_scores, px_labels),
        pixel_f1max=f1_max(px_scores, px_labels)[0],
        aupro=aupro(anom_maps, anom_masks, fpr_limit),
    )


def evaluate(
    results: dict[str, AnomalyResult],
    truth: dict[str, GroundTruthEntry],
    fpr_limit: float = 0.3,
) -> EvalReport:
    """Full report: pooled metrics, per-category breakdown, category mean.

    Image metrics use the pooled image scores; pixel metrics pool every test
    pixel; AUPRO sees only the anomalous images' maps. Categories lacking
    either class are skipped in the breakdown. Input order is irrelevant.
    """
    ids = sorted(results)
    if set(ids) != set(truth):
        raise ValidationError("results and ground truth cover different images")
    if not ids:
        raise ValidationError("nothing to evaluate")

    pooled = _bundle(results, truth, ids, fpr_limit)

    per_category: dict[str, MetricBundle] = {}
    categories = sorted({truth[i].category for i in ids})
    for cat in categories:
        cat_ids = [i for i in ids if truth[i].category == cat]
        labels = {truth[i].label for i in cat_ids}
        if labels != {"normal", "anomalous"}:
            continue
        per_category[cat] = _bundle(results, truth, cat_ids, fpr_limit)

    category_mean = None
    if per_category:
        stack = list(per_category.values())
        category_mean = MetricBundle(
            *(
                float(np.mean([getattr(b, name) for b in stack]))
                for name in (
                    "image_auroc",
                    "image_ap",
                    "image_f1max",
                    "pixel_auroc",
                    "pixel_ap",
                    "pixel_f1max",
                    "aupro",
                )
            )
        )

    return EvalReport(
        image_auroc=pooled.image_auroc,
        image_ap=pooled.image_ap,
        image_f1max=pooled.image_f1max,
        pixel_auroc=pooled.pixel_auroc,
        pixel_ap=pooled.pixel_ap,
        pixel_f1max=pooled.pixel_f1max,
        aupro=pooled.aupro,
        per_category=per_category,
        category_mean=category_mean,
    )
