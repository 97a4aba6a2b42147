"""Saliency evaluation metrics.

Conventions, fixed here and relied on by the tests:

- Binarisation: a prediction in [0, 1] is thresholded as pred * 255 >= t for
  every integer t in 0..255, so threshold 0 gives the all-ones mask.
- Precision of an empty binary mask is 0; recall requires non-empty ground
  truth (callers skip empty-GT images for precision/recall/F).
- F_t = (1 + beta2) * P * R / (beta2 * P + R), 0 where the denominator is 0,
  with beta2 = 0.3.
- The structure measure splits into an object term (foreground/background
  mean-dispersion similarity weighted by the foreground ratio) and a region
  term (per-quadrant SSIM about the ground-truth centroid), mixed with
  alpha = 0.5 and clamped to [0, 1]; an all-background ground truth scores
  1 - mean(pred), an all-foreground one mean(pred).
- The alignment measure compares mean-shifted binary maps through
  xi = 2 * phi_g * phi_m / (phi_g^2 + phi_m^2), enhanced as (xi + 1)^2 / 4
  and averaged over pixels; whenever either map is constant it falls back to
  1 - mean|M - G|.  The reported value is the max over thresholds (a mean
  variant is available).
- MAE is the plain mean absolute difference.

Counting per threshold uses sorted-value bisection, which is exactly the
elementwise comparison count (same float comparisons), just cheaper.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

EPS = float(np.spacing(1.0))
NUM_THRESHOLDS = 256
BETA2 = 0.3
ALPHA = 0.5


def _check_pred(pred: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2:
        raise ValidationError(f"prediction must be 2-D, got shape {pred.shape}")
    if not np.all(np.isfinite(pred)):
        raise ValidationError("prediction contains non-finite values")
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ValidationError(f"prediction values must lie in [0, 1], got [{pred.min()}, {pred.max()}]")
    return pred


def _check_gt(gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise ValidationError(f"ground truth must be 2-D, got shape {gt.shape}")
    as_float = gt.astype(np.float64)
    if not np.all((as_float == 0.0) | (as_float == 1.0)):
        raise ValidationError("ground truth must be binary (0/1)")
    return as_float > 0.5


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = _check_pred(pred)
    gt_b = _check_gt(gt)
    if pred.shape != gt_b.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth shape {gt_b.shape}")
    return pred, gt_b


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt_b = _check_pair(pred, gt)
    return float(np.abs(pred - gt_b.astype(np.float64)).mean())


def _threshold_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each threshold t: |pred*255 >= t| overall and within the ground truth."""
    pv = pred * 255.0
    thresholds = np.arange(NUM_THRESHOLDS, dtype=np.float64)
    all_sorted = np.sort(pv, axis=None)
    fg_sorted = np.sort(pv[gt], axis=None)
    m = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="left")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="left")
    return m.astype(np.int64), tp.astype(np.int64)


def pr_curve(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall over all 256 thresholds; ground truth must be
    non-empty.  Empty binary masks score precision 0."""
    pred, gt_b = _check_pair(pred, gt)
    n_fg = int(gt_b.sum())
    if n_fg == 0:
        raise ValidationError("pr_curve: ground truth has no foreground")
    m, tp = _threshold_counts(pred, gt_b)
    precision = np.where(m > 0, tp / np.maximum(m, 1), 0.0)
    recall = tp / n_fg
    return precision, recall


def f_measure_curve(precision: np.ndarray, recall: np.ndarray, beta2: float = BETA2) -> np.ndarray:
    num = (1.0 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def f_measure_max(pred: np.ndarray, gt: np.ndarray, beta2: float = BETA2) -> float:
    precision, recall = pr_curve(pred, gt)
    return float(f_measure_curve(precision, recall, beta2).max())


# ---------------------------------------------------------------------------
# structure measure


def _s_object_term(values: np.ndarray) -> float:
    # mean/dispersion similarity of the masked prediction values
    x = float(values.mean())
    sigma = float(values.std())
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred[gt]
    bg = 1.0 - pred[~gt]
    u = float(gt.mean())
    return u * _s_object_term(fg) + (1.0 - u) * _s_object_term(bg)


def _centroid_1based(gt: np.ndarray) -> tuple[int, int]:
    """Foreground centre of mass, 1-based, rounded half-up; image centre for
    an empty mask (callers handle that case earlier)."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return int(np.floor(w / 2.0 + 0.5)), int(np.floor(h / 2.0 + 0.5))
    ys, xs = np.nonzero(gt)
    cx = int(np.floor((xs + 1.0).mean() + 0.5))
    cy = int(np.floor((ys + 1.0).mean() + 0.5))
    return cx, cy


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    # SSIM-style similarity on one quadrant, sample variance over n - 1
    n = pred.size
    x = float(pred.mean())
    y = float(gt.mean())
    sigma_x = float(((pred - x) ** 2).sum()) / (n - 1 + EPS)
    sigma_y = float(((gt - y) ** 2).sum()) / (n - 1 + EPS)
    sigma_xy = float(((pred - x) * (gt - y)).sum()) / (n - 1 + EPS)
    num = 4.0 * x * y * sigma_xy
    den = (x * x + y * y) * (sigma_x + sigma_y)
    if num != 0.0:
        return num / (den + EPS)
    if den == 0.0:
        return 1.0
    return 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cx, cy = _centroid_1based(gt)
    area = h * w
    gtf = gt.astype(np.float64)
    score = 0.0
    # quadrants about the centroid; weights are ground-truth area fractions
    for (rs, re, cs, ce) in ((0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)):
        if re <= rs or ce <= cs:
            continue
        weight = (re - rs) * (ce - cs) / area
        score += weight * _region_ssim(pred[rs:re, cs:ce], gtf[rs:re, cs:ce])
    return score


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = ALPHA) -> float:
    """Structure similarity between a soft prediction and a binary mask."""
    pred, gt_b = _check_pair(pred, gt)
    y = float(gt_b.mean())
    if y == 0.0:
        score = 1.0 - float(pred.mean())
    elif y == 1.0:
        score = float(pred.mean())
    else:
        score = alpha * _s_object(pred, gt_b) + (1.0 - alpha) * _s_region(pred, gt_b)
    return float(min(max(score, 0.0), 1.0))


# ---------------------------------------------------------------------------
# alignment measure


def _enhanced(a: float, b: float) -> float:
    xi = 2.0 * a * b / (a * a + b * b + EPS)
    return (xi + 1.0) ** 2 / 4.0


def e_measure_curve(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Alignment score per threshold, averaged over pixels.

    Works on the four (mask, ground truth) agreement counts per threshold,
    which is exactly the per-pixel formula since the mean-shifted maps take
    only two values each.
    """
    pred, gt_b = _check_pair(pred, gt)
    n = gt_b.size
    n_fg = int(gt_b.sum())
    m, tp = _threshold_counts(pred, gt_b)
    fp = m - tp
    fn = n_fg - tp
    scores = np.empty(NUM_THRESHOLDS, dtype=np.float64)
    mu_g = n_fg / n
    for t in range(NUM_THRESHOLDS):
        if n_fg == 0 or n_fg == n or m[t] == 0 or m[t] == n:
            # either map constant: plain agreement 1 - mean|M - G|
            scores[t] = 1.0 - (fp[t] + fn[t]) / n
            continue
        mu_m = m[t] / n
        tn = n - tp[t] - fp[t] - fn[t]
        total = (tp[t] * _enhanced(1.0 - mu_g, 1.0 - mu_m)
                 + fp[t] * _enhanced(-mu_g, 1.0 - mu_m)
                 + fn[t] * _enhanced(1.0 - mu_g, -mu_m)
                 + tn * _enhanced(-mu_g, -mu_m))
        scores[t] = total / n
    return scores


def e_measure_max(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(e_measure_curve(pred, gt).max())


def e_measure_mean(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(e_measure_curve(pred, gt).mean())


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class PairMetrics:
    name: str
    s_measure: float
    e_value: float
    mae: float
    empty_gt: bool
    f_max: float | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f_curve: np.ndarray | None = None


@dataclass
class MetricsReport:
    per_image: list[PairMetrics]
    e_variant: str
    skipped_empty_gt: int
    num_images: int
    mean_s_measure: float
    mean_e_value: float
    mean_mae: float
    mean_f_max: float | None
    mean_precision: np.ndarray | None = None
    mean_recall: np.ndarray | None = None
    mean_f_curve: np.ndarray | None = None
    scalar_keys: tuple[str, ...] = field(default=("s_measure", "f_max", "e_max", "mae"), repr=False)


def evaluate_pair(name: str, pred: np.ndarray, gt: np.ndarray, e_variant: str = "max") -> PairMetrics:
    pred, gt_b = _check_pair(pred, gt)
    curve = e_measure_curve(pred, gt_b)
    e_value = float(curve.max()) if e_variant == "max" else float(curve.mean())
    out = PairMetrics(
        name=name,
        s_measure=s_measure(pred, gt_b),
        e_value=e_value,
        mae=mae(pred, gt_b),
        empty_gt=not bool(gt_b.any()),
    )
    if not out.empty_gt:
        precision, recall = pr_curve(pred, gt_b)
        f_curve = f_measure_curve(precision, recall)
        out.f_max = float(f_curve.max())
        out.precision = precision
        out.recall = recall
        out.f_curve = f_curve
    return out


def evaluate_dataset(pairs: list[tuple[str, np.ndarray, np.ndarray]], e_variant: str = "max",
                     threads: int = 1) -> MetricsReport:
    """Score every (name, pred, gt) pair and aggregate.

    Pairs with empty ground truth contribute to the structure/alignment/MAE
    means but are excluded from precision/recall/F aggregation and counted
    separately.  Pairs are processed in name order whatever the input order
    or thread count, so aggregate values never depend on listing order.
    """
    if e_variant not in ("max", "mean"):
        raise ValidationError(f"e_variant must be 'max' or 'mean', got {e_variant!r}")
    if not pairs:
        raise ValidationError("evaluate_dataset: no image pairs to evaluate")
    if threads < 1:
        raise ValidationError(f"threads must be >= 1, got {threads}")
    names = [name for name, _, _ in pairs]
    if len(set(names)) != len(names):
        raise ValidationError("evaluate_dataset: duplicate image names")
    pairs = sorted(pairs, key=lambda item: item[0])

    def score(item: tuple[str, np.ndarray, np.ndarray]) -> PairMetrics:
        name, pred, gt = item
        return evaluate_pair(name, pred, gt, e_variant)

    if threads == 1:
        results = [score(item) for item in pairs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, pairs))

    scored = [r for r in results if not r.empty_gt]
    report = MetricsReport(
        per_image=results,
        e_variant=e_variant,
        skipped_empty_gt=len(results) - len(scored),
        num_images=len(results),
        mean_s_measure=float(np.mean([r.s_measure for r in results])),
        mean_e_value=float(np.mean([r.e_value for r in results])),
        mean_mae=float(np.mean([r.mae for r in results])),
        mean_f_max=float(np.mean([r.f_max for r in scored])) if scored else None,
    )
    if scored:
        report.mean_precision = np.mean([r.precision for r in scored], axis=0)
        report.mean_recall = np.mean([r.recall for r in scored], axis=0)
        report.mean_f_curve = np.mean([r.f_curve for r in scored], axis=0)
    return report
