import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radkit.anomaly_map import AnomalyResult
from radkit.errors import ValidationError
from radkit.metrics import (
    GroundTruthEntry,
    aupro,
    auroc,
    average_precision,
    evaluate,
    f1_max,
)


# --- independent oracles ----------------------------------------------------


def auroc_pairwise_oracle(scores, labels):
    s = np.asarray(scores, float)
    y = np.asarray(labels, bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def ap_sweep_oracle(scores, labels):
    s = np.asarray(scores, float)
    y = np.asarray(labels, bool)
    ap, prev_recall = 0.0, 0.0
    for threshold in np.unique(s)[::-1]:
        predicted = s >= threshold
        tp = int((predicted & y).sum())
        fp = int((predicted & ~y).sum())
        precision = tp / (tp + fp)
        recall = tp / int(y.sum())
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1_sweep_oracle(scores, labels):
    s = np.asarray(scores, float)
    y = np.asarray(labels, bool)
    best_f1, best_thr = -1.0, None
    for threshold in np.unique(s):  # ascending: ties keep the lowest threshold
        predicted = s >= threshold
        tp = int((predicted & y).sum())
        fp = int((predicted & ~y).sum())
        fn = int(y.sum()) - tp
        f1 = 2 * tp / (2 * tp + fp + fn)
        if f1 > best_f1:
            best_f1, best_thr = f1, threshold
    return best_f1, best_thr


def label_components_oracle(mask):
    """8-connectivity components by BFS flood fill; no scipy."""
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    regions = []
    h, w = mask.shape
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack, pixels = [(sy, sx)], []
            seen[sy, sx] = True
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            regions.append(pixels)
    return regions


def aupro_oracle(maps, masks, fpr_limit=0.3):
    regions = []
    neg = []
    all_values = []
    for pixel_map, mask in zip(maps, masks):
        arr = np.asarray(pixel_map, float)
        m = np.asarray(mask, bool)
        for pixels in label_components_oracle(m):
            regions.append(np.array([arr[y, x] for y, x in pixels]))
        neg.append(arr[~m])
        all_values.append(arr.ravel())
    neg = np.concatenate(neg)
    thresholds = np.unique(np.concatenate(all_values))[::-1]

    points = [(0.0, 0.0)]
    for threshold in thresholds:
        pro = float(np.mean([(r >= threshold).mean() for r in regions]))
        fpr = float((neg >= threshold).mean())
        points.append((fpr, pro))

    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x1 <= x0 or x0 >= fpr_limit:
            continue
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / fpr_limit


# --- AUROC ------------------------------------------------------------------


def test_auroc_separable_pair():
    assert auroc([0.1, 0.9], [0, 1]) == 1.0


def test_auroc_all_equal_scores():
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_auroc_single_class_rejected():
    with pytest.raises(ValidationError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    scores = np.round(rng.normal(size=200), 1)  # coarse grid forces ties
    labels = rng.integers(0, 2, 200)
    labels[0], labels[1] = 0, 1
    assert abs(auroc(scores, labels) - auroc_pairwise_oracle(scores, labels)) <= 1e-12


def test_auroc_flip_identity_without_ties():
    rng = np.random.default_rng(1)
    scores = rng.permutation(np.linspace(0, 1, 120))
    labels = rng.integers(0, 2, 120)
    labels[:2] = [0, 1]
    assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rank_metrics_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=60)
    labels = rng.integers(0, 2, 60)
    labels[:2] = [0, 1]
    warped = np.exp(3.0 * scores) + 1.0  # strictly increasing map
    assert auroc(warped, labels) == pytest.approx(auroc(scores, labels), abs=1e-12)
    assert average_precision(warped, labels) == pytest.approx(
        average_precision(scores, labels), abs=1e-12
    )
    assert f1_max(warped, labels)[0] == pytest.approx(f1_max(scores, labels)[0], abs=1e-12)


# --- AP ----------------------------------------------------------------------


def test_ap_perfect_ranking():
    assert average_precision([0.2, 0.9], [0, 1]) == 1.0


def test_ap_positive_ranked_last():
    n = 7
    scores = np.arange(n, dtype=float)
    labels = np.zeros(n, int)
    labels[0] = 1  # lowest score is the only positive
    assert average_precision(scores, labels) == pytest.approx(1.0 / n)


def test_ap_matches_sweep_oracle():
    rng = np.random.default_rng(2)
    scores = np.round(rng.normal(size=75), 1)
    labels = rng.integers(0, 2, 75)
    labels[0] = 1
    assert average_precision(scores, labels) == pytest.approx(
        ap_sweep_oracle(scores, labels), abs=1e-12
    )


def test_ap_requires_a_positive():
    with pytest.raises(ValidationError):
        average_precision([0.1, 0.4], [0, 0])


# --- F1 -----------------------------------------------------------------------


def test_f1_separable():
    value, _ = f1_max([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert value == 1.0


def test_f1_all_same_scores():
    n, p = 10, 3
    labels = np.array([1] * p + [0] * (n - p))
    value, _ = f1_max(np.full(n, 0.5), labels)
    assert value == pytest.approx(2 * p / (n + p))


def test_f1_matches_sweep_oracle():
    rng = np.random.default_rng(3)
    scores = np.round(rng.normal(size=80), 1)
    labels = rng.integers(0, 2, 80)
    labels[0] = 1
    value, threshold = f1_max(scores, labels)
    o_value, o_threshold = f1_sweep_oracle(scores, labels)
    assert value == pytest.approx(o_value, abs=1e-12)
    assert threshold == o_threshold


# --- AUPRO ---------------------------------------------------------------------


def test_aupro_map_equal_to_mask_is_one():
    rng = np.random.default_rng(4)
    mask = rng.random((16, 16)) > 0.8
    mask[0, 0] = True  # ensure a region exists
    assert aupro([mask.astype(float)], [mask]) == pytest.approx(1.0)


def test_aupro_anticorrelated_map():
    mask = np.zeros((8, 8), bool)
    mask[2:4, 2:4] = True
    inverted = (~mask).astype(float)
    value = aupro([inverted], [mask])
    assert value == pytest.approx(aupro_oracle([inverted], [mask]), abs=1e-9)
    assert value < 0.51  # overlap is zero until FPR hits 1


def test_aupro_matches_componentwise_oracle():
    rng = np.random.default_rng(5)
    maps, masks = [], []
    for _ in range(3):
        mask = np.zeros((16, 16), bool)
        for _region in range(3):
            y, x = rng.integers(0, 12, 2)
            mask[y : y + rng.integers(2, 5), x : x + rng.integers(2, 5)] = True
        maps.append(rng.random((16, 16)))
        masks.append(mask)
    assert aupro(maps, masks) == pytest.approx(aupro_oracle(maps, masks), abs=1e-9)


def test_aupro_single_full_image_region_matches_roc_like_oracle():
    rng = np.random.default_rng(6)
    mask = np.zeros((16, 16), bool)
    mask[:8] = True  # one region spanning half the image
    pixel_map = rng.random((16, 16)) + mask * 0.5
    assert aupro([pixel_map], [mask]) == pytest.approx(
        aupro_oracle([pixel_map], [mask]), abs=1e-9
    )


def test_aupro_needs_regions():
    with pytest.raises(ValidationError):
        aupro([np.zeros((4, 4))], [np.zeros((4, 4), bool)])


def test_aupro_respects_fpr_limit_argument():
    rng = np.random.default_rng(7)
    mask = np.zeros((12, 12), bool)
    mask[3:6, 3:6] = True
    pixel_map = rng.random((12, 12)) + mask
    full = aupro([pixel_map], [mask], fpr_limit=1.0)
    tight = aupro([pixel_map], [mask], fpr_limit=0.05)
    assert tight >= full - 1e-12


# --- evaluate -------------------------------------------------------------------


def fake_result(pixel_map, fraction=0.02):
    arr = np.asarray(pixel_map, float)
    k = max(1, int(np.ceil(fraction * arr.size)))
    score = float(np.sort(arr.ravel())[-k:].mean())
    return AnomalyResult(
        layer_grids={4: arr},
        fused_grid=arr,
        pixel_map=arr,
        image_score=score,
        topk_images=np.array([0]),
    )


def synthetic_eval_case(rng, categories=("a", "b"), per_cat=6):
    results, truth = {}, {}
    for cat in categories:
        for i in range(per_cat):
            image_id = f"{cat}{i}"
            anomalous = i % 2 == 0
            base = rng.random((16, 16)) * 0.3
            mask = None
            if anomalous:
                mask = np.zeros((16, 16), bool)
                mask[4:8, 4:8] = True
                base = base + mask * 1.0
            results[image_id] = fake_result(base)
            truth[image_id] = GroundTruthEntry(
                label="anomalous" if anomalous else "normal", category=cat, mask=mask
            )
    return results, truth


def test_evaluate_separable_case_is_perfect():
    results, truth = synthetic_eval_case(np.random.default_rng(8))
    report = evaluate(results, truth)
    assert report.image_auroc == 1.0
    assert report.pixel_auroc == 1.0
    assert report.image_ap == 1.0
    assert report.aupro >= 0.99


def test_evaluate_is_order_invariant():
    results, truth = synthetic_eval_case(np.random.default_rng(9))
    report_a = evaluate(results, truth)
    shuffled_results = dict(reversed(list(results.items())))
    shuffled_truth = dict(reversed(list(truth.items())))
    report_b = evaluate(shuffled_results, shuffled_truth)
    assert report_a.as_dict() == report_b.as_dict()


def test_evaluate_single_category_equals_its_breakdown():
    results, truth = synthetic_eval_case(np.random.default_rng(10), categories=("solo",))
    report = evaluate(results, truth)
    assert set(report.per_category) == {"solo"}
    assert report.per_category["solo"].as_dict() == report.pooled.as_dict()
    assert report.category_mean.as_dict() == report.pooled.as_dict()


def test_evaluate_missing_mask_names_image():
    results, truth = synthetic_eval_case(np.random.default_rng(11))
    key = next(k for k, v in truth.items() if v.label == "anomalous")
    truth[key] = GroundTruthEntry(label="anomalous", category=truth[key].category, mask=None)
    with pytest.raises(ValidationError, match=key):
        evaluate(results, truth)


def test_evaluate_rejects_inconsistent_resolutions():
    results, truth = synthetic_eval_case(np.random.default_rng(12))
    key = next(iter(results))
    results[key] = fake_result(np.random.default_rng(0).random((8, 8)))
    with pytest.raises(ValidationError, match="shape"):
        evaluate(results, truth)


def test_csv_column_order():
    results, truth = synthetic_eval_case(np.random.default_rng(13))
    report = evaluate(results, truth)
    header = report.to_csv().splitlines()[0]
    assert header == "scope,I-AUROC,I-AP,I-F1max,P-AUROC,P-AP,P-F1max,AUPRO"
