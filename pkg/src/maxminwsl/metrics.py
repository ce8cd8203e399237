"""
Evaluation protocol: classification error, foreground/background Dice (F1) and
region-size statistics. F1 scores are pooled over all evaluated pixels.
"""
from typing import NamedTuple, Sequence

import numpy as np
import structlog

from .data_types import MetricsReport, SizeRecord
from .masking import SoftMask

logger = structlog.get_logger(__name__)

THRESHOLD = 0.5


class SizeSummary(NamedTuple):
    records: list[SizeRecord]
    mean_abs_gap: float
    mean_pred_fraction: float


def binarize(mask, threshold: float = THRESHOLD) -> np.ndarray:
    """Foreground where the soft value is >= threshold; boolean masks pass through."""
    values = mask.values if isinstance(mask, SoftMask) else np.asarray(mask)
    if values.dtype == bool:
        return values
    return values >= threshold


def classification_error(preds: Sequence[int], truths: Sequence[int]) -> float:
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.shape != truths.shape:
        raise ValueError(f"classification_error: {preds.size} predictions for {truths.size} labels")
    if preds.size == 0:
        raise ValueError("classification_error needs at least one sample")
    return 100.0 * float(np.count_nonzero(preds != truths)) / preds.size


def dice(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FP + FN) in percent; 100 when both sets are empty."""
    denom = 2 * tp + fp + fn
    return 100.0 if denom == 0 else 100.0 * 2 * tp / denom


def pixel_confusion(pred_masks: Sequence, gt_masks: Sequence) -> np.ndarray:
    """Pooled counts [[TP, FN], [FP, TN]]; rows are truth fg/bg, columns predicted fg/bg."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"pixel_confusion: {len(pred_masks)} predictions for {len(gt_masks)} ground truths")
    confusion = np.zeros((2, 2), dtype=np.int64)
    for pred, gt in zip(pred_masks, gt_masks):
        pred, gt = binarize(pred), binarize(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pixel_confusion: prediction {pred.shape} vs ground truth {gt.shape}")
        confusion[0, 0] += np.count_nonzero(pred & gt)
        confusion[0, 1] += np.count_nonzero(~pred & gt)
        confusion[1, 0] += np.count_nonzero(pred & ~gt)
        confusion[1, 1] += np.count_nonzero(~pred & ~gt)
    return confusion


def f1_from_confusion(confusion: np.ndarray) -> tuple[float, float]:
    (tp, fn), (fp, tn) = np.asarray(confusion).tolist()
    return dice(tp, fp, fn), dice(tn, fn, fp)


def f1_scores(pred_mask, gt_mask) -> tuple[float, float]:
    """
    (F1+, F1-) of one image. Soft masks are binarized at ``THRESHOLD`` first.

    F1+(M, G) == F1-(~M, ~G) holds for binary masks. Complementing a soft mask instead gives
    1 - 0.5 == 0.5 at the threshold, which stays foreground, so binarize before complementing.
    """
    return f1_from_confusion(pixel_confusion([pred_mask], [gt_mask]))


def size_report(pred_masks: Sequence, gt_masks: Sequence, names: Sequence[str] | None = None) -> SizeSummary:
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"size_report: {len(pred_masks)} predictions for {len(gt_masks)} ground truths")
    names = names if names is not None else [str(i) for i in range(len(pred_masks))]
    records = [
        SizeRecord(sample=name, true_fraction=float(binarize(gt).mean()), pred_fraction=float(binarize(pred).mean()))
        for name, pred, gt in zip(names, pred_masks, gt_masks)
    ]
    if not records:
        return SizeSummary([], 0.0, 0.0)
    gaps = [abs(r.pred_fraction - r.true_fraction) for r in records]
    return SizeSummary(records, float(np.mean(gaps)), float(np.mean([r.pred_fraction for r in records])))


def build_report(
    pred_labels: Sequence[int],
    true_labels: Sequence[int],
    pred_masks: Sequence,
    gt_masks: Sequence,
    names: Sequence[str] | None = None,
    classified: Sequence[bool] | None = None,
) -> MetricsReport:
    """
    Full report over one split. ``classified`` selects the samples whose label counts towards
    the classification error (background-only samples carry no class); None means all.
    """
    classified = np.ones(len(true_labels), dtype=bool) if classified is None else np.asarray(classified, dtype=bool)
    preds, truths = np.asarray(pred_labels)[classified], np.asarray(true_labels)[classified]
    cl_error = classification_error(preds, truths) if truths.size else None
    confusion = pixel_confusion(pred_masks, gt_masks)
    f1_plus, f1_minus = f1_from_confusion(confusion)
    sizes = size_report(pred_masks, gt_masks, names)
    logger.info("Metrics computed", cl_error=cl_error, f1_plus=round(f1_plus, 2), f1_minus=round(f1_minus, 2),
                samples=len(gt_masks))
    return MetricsReport(
        cl_error=cl_error,
        f1_plus=f1_plus,
        f1_minus=f1_minus,
        confusion=confusion.tolist(),
        size_records=sizes.records,
        mean_abs_size_gap=sizes.mean_abs_gap,
        mean_pred_fraction=sizes.mean_pred_fraction,
        n_samples=len(gt_masks),
    )
