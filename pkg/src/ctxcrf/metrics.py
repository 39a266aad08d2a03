"""Pixel accuracy, mean class accuracy and IoU from a confusion matrix."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import VOID


class EmptyEvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    c: np.ndarray   # c[i, j]: pixels with ground truth i predicted as j

    @classmethod
    def zeros(cls, K):
        return cls(np.zeros((K, K), dtype=np.int64))

    @classmethod
    def from_masks(cls, pred, gt, K, void=VOID):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
        keep = gt != void
        g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= K or p.min() < 0 or p.max() >= K):
            raise ValueError("class index out of range")
        return cls(np.bincount(g * K + p, minlength=K * K).reshape(K, K))

    @property
    def t(self):
        return self.c.sum(axis=1)

    @property
    def predicted(self):
        return self.c.sum(axis=0)

    def __add__(self, other):
        return ConfusionMatrix(self.c + other.c)

    def per_class(self):
        """Per-class recall and IoU; classes absent from both GT and prediction get NaN."""
        inter = np.diag(self.c).astype(np.float64)
        t, pr = self.t, self.predicted
        union = t + pr - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            recall = np.where(t > 0, inter / np.maximum(t, 1), np.where(union > 0, 0.0, np.nan))
            iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
        return recall, iou

    def scores(self):
        total = self.c.sum()
        if total == 0:
            raise EmptyEvaluationError("no non-void ground-truth pixels to evaluate")
        recall, iou = self.per_class()
        return float(np.trace(self.c) / total), float(np.nanmean(recall)), float(np.nanmean(iou))


def evaluate(predictions, ground_truth, K, void=VOID):
    """Return ``(pixel_acc, mean_acc, iou, confusion)`` over one mask pair or sequences of them.

    Classes that appear neither in the ground truth nor in the prediction are
    left out of the class means.
    """
    if isinstance(predictions, np.ndarray) and predictions.ndim == 2:
        predictions, ground_truth = [predictions], [ground_truth]
    if len(predictions) != len(ground_truth):
        raise ValueError("different number of predictions and ground-truth masks")
    cm = ConfusionMatrix.zeros(K)
    for p, g in zip(predictions, ground_truth):
        cm = cm + ConfusionMatrix.from_masks(p, g, K, void)
    pa, ma, iou = cm.scores()
    return pa, ma, iou, cm


def class_iou(cm: ConfusionMatrix, classes):
    return float(np.nanmean(cm.per_class()[1][list(classes)]))


def report_tsv(cm: ConfusionMatrix, class_names=None) -> str:
    pa, ma, iou = cm.scores()
    recall, ious = cm.per_class()
    K = cm.c.shape[0]
    names = class_names or [str(k) for k in range(K)]
    lines = ["metric\tvalue", f"pixel_accuracy\t{pa:.6f}", f"mean_accuracy\t{ma:.6f}", f"iou\t{iou:.6f}",
             "", "class\tname\tgt_pixels\tpred_pixels\taccuracy\tiou"]
    for k in range(K):
        lines.append(f"{k}\t{names[k] if k < len(names) else k}\t{cm.t[k]}\t{cm.predicted[k]}\t"
                     f"{recall[k]:.6f}\t{ious[k]:.6f}")
    return "\n".join(lines) + "\n"


def report_json(cm: ConfusionMatrix) -> str:
    pa, ma, iou = cm.scores()
    recall, ious = cm.per_class()
    nan_to_none = lambda a: [None if np.isnan(v) else float(v) for v in a]
    return json.dumps({
        "pixel_accuracy": pa, "mean_accuracy": ma, "iou": iou,
        "per_class_accuracy": nan_to_none(recall), "per_class_iou": nan_to_none(ious),
        "confusion": cm.c.tolist(),
    }, indent=2, sort_keys=True) + "\n"
