"""Image/volume quality and classification metrics.

PSNR and SSIM assume inputs in [0,1] (dynamic range 1.0).  SSIM of a volume
is the mean of 2D SSIMs over axis-0 slices.  Volume DSC thresholds each
volume at 1.5x its own mean density (optionally the ground-truth mean for
both) before computing overlap.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import ndimage

from .errors import MetricError

HIGH_DENSITY_FACTOR = 1.5


def _as_same_shape(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _values(x):
    return x.values if hasattr(x, "values") else x


def psnr(a, b) -> float:
    """10*log10(1/MSE) in dB; identical inputs give +inf."""
    a, b = _as_same_shape(_values(a), _values(b), "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel1d(win_size: int, sigma: float) -> np.ndarray:
    r = (win_size - 1) / 2.0
    x = np.arange(win_size, dtype=np.float64) - r
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _ssim_2d(a, b, win_size, sigma, k1, k2, data_range):
    h, w = a.shape
    if min(h, w) < win_size:
        raise MetricError(f"ssim: image {a.shape} smaller than {win_size}x{win_size} window")
    kern = _gaussian_kernel1d(win_size, sigma)

    def win_mean(x):
        y = ndimage.correlate1d(x, kern, axis=0, mode="constant")
        y = ndimage.correlate1d(y, kern, axis=1, mode="constant")
        r = win_size // 2
        return y[r : h - r, r : w - r]   # full-window positions only

    mu_a, mu_b = win_mean(a), win_mean(b)
    e_aa, e_bb, e_ab = win_mean(a * a), win_mean(b * b), win_mean(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def ssim(a, b, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM over full Gaussian windows; volumes average their
    axis-0 slice SSIMs."""
    a, b = _as_same_shape(_values(a), _values(b), "ssim")
    if win_size % 2 != 1 or win_size < 3:
        raise MetricError(f"ssim: win_size must be odd and >= 3, got {win_size}")
    if a.ndim == 2:
        return _ssim_2d(a, b, win_size, sigma, k1, k2, data_range)
    if a.ndim == 3:
        return float(np.mean([_ssim_2d(a[i], b[i], win_size, sigma, k1, k2, data_range)
                              for i in range(a.shape[0])]))
    raise MetricError(f"ssim: expected 2D or 3D input, got {a.ndim}D")


def _dice(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = float(np.logical_and(pred, gt).sum())
    denom = float(pred.sum()) + float(gt.sum())
    if denom == 0.0:
        return 1.0
    return 2.0 * inter / denom


def dsc_volumes(recon, gt, use_gt_mean: bool = False) -> float:
    """Dice overlap of the high-density masks (threshold 1.5x mean density,
    each volume's own mean unless use_gt_mean)."""
    a, b = _as_same_shape(_values(recon), _values(gt), "dsc_volumes")
    thr_b = HIGH_DENSITY_FACTOR * float(b.mean())
    thr_a = thr_b if use_gt_mean else HIGH_DENSITY_FACTOR * float(a.mean())
    return _dice(a > thr_a, b > thr_b)


def high_density_mask(vol) -> np.ndarray:
    v = np.asarray(_values(vol), dtype=np.float64)
    return v > HIGH_DENSITY_FACTOR * float(v.mean())


def mask_metrics(pred, gt) -> dict:
    """DSC, IoU, precision and recall of binary masks.  Empty-vs-empty
    counts as a perfect match; an empty prediction has precision 1 and an
    empty ground truth recall 1 (no false detections of that kind)."""
    pred, gt = _as_same_shape(pred, gt, "mask_metrics")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0.0, 1.0)).all():
            raise MetricError(f"mask_metrics: {name} is not binary")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = float(np.logical_and(pred, gt).sum())
    fp = float(np.logical_and(pred, ~gt).sum())
    fn = float(np.logical_and(~pred, gt).sum())
    union = tp + fp + fn
    return {
        "dsc": _dice(pred, gt),
        "iou": 1.0 if union == 0 else tp / union,
        "precision": 1.0 if tp + fp == 0 else tp / (tp + fp),
        "recall": 1.0 if tp + fn == 0 else tp / (tp + fn),
    }


def classification_report(preds, labels, num_classes: int) -> dict:
    """Accuracy plus macro precision/recall/F1 and a per-class table."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise MetricError(f"classification_report: {preds.shape} vs {labels.shape}")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise MetricError(f"classification_report: {name} outside [0,{num_classes})")
    per_class = []
    for k in range(num_classes):
        tp = float(np.sum((preds == k) & (labels == k)))
        fp = float(np.sum((preds == k) & (labels != k)))
        fn = float(np.sum((preds != k) & (labels == k)))
        if tp + fp + fn == 0.0:
            warnings.warn(f"class {k} absent from predictions and labels; "
                          "contributes 0 to macro averages")
            per_class.append({"class": k, "precision": 0.0, "recall": 0.0,
                              "f1": 0.0, "support": 0})
            continue
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class.append({"class": k, "precision": prec, "recall": rec,
                          "f1": f1, "support": int(tp + fn)})
    return {
        "accuracy": float(np.mean(preds == labels)) if preds.size else 0.0,
        "macro_precision": float(np.mean([c["precision"] for c in per_class])),
        "macro_recall": float(np.mean([c["recall"] for c in per_class])),
        "macro_f1": float(np.mean([c["f1"] for c in per_class])),
        "per_class": per_class,
        "count": int(preds.size),
    }
