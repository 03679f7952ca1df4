"""Evaluation metrics: accuracy / macro-F1, PSNR, uniform-window SSIM, Dice / IoU."""
from __future__ import annotations

import math

import numpy as np

from .exceptions import ContractError, DimensionError

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def accuracy_macro_f1(predictions, targets, num_classes: int) -> tuple[float, float]:
    """Classes absent from both predictions and targets contribute an F1 of 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(targets, dtype=np.int64)
    if pred.shape != true.shape:
        raise DimensionError(f"prediction/target lengths differ: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ContractError("accuracy_macro_f1 on empty input")
    if pred.min() < 0 or true.min() < 0 or max(pred.max(), true.max()) >= num_classes:
        raise ContractError(f"class ids must lie in [0, {num_classes})")
    acc = float(np.mean(pred == true))
    f1s = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return acc, float(np.mean(f1s))


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99 dB."""
    a, b = _pair(pred, target)
    err = float(np.mean((a - b) ** 2))
    if not math.isfinite(err):
        return math.nan
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def ssim(pred, target, window: int = 8, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean SSIM over non-overlapping uniform ``window x window`` tiles of a 2-D image."""
    a, b = _pair(pred, target)
    if a.ndim != 2:
        raise DimensionError(f"ssim expects a 2-D image, got shape {a.shape}")
    h, w = a.shape
    if h < window or w < window:
        raise ContractError(f"image {h}x{w} is smaller than the {window}x{window} window")
    nh, nw = h // window, w // window
    ta = a[:nh * window, :nw * window].reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh, nw, -1)
    tb = b[:nh * window, :nw * window].reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh, nw, -1)
    mu_a, mu_b = ta.mean(-1), tb.mean(-1)
    var_a, var_b = ta.var(-1), tb.var(-1)
    cov = ((ta - mu_a[..., None]) * (tb - mu_b[..., None])).mean(-1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dice_iou(pred_mask, target_mask) -> tuple[float, float]:
    """Dice and IoU of two binary masks; two empty masks score (1, 1)."""
    a, b = _pair(pred_mask, target_mask)
    if not (np.isin(a, (0.0, 1.0)).all() and np.isin(b, (0.0, 1.0)).all()):
        raise ContractError("dice_iou expects binary masks")
    a, b = a.astype(bool), b.astype(bool)
    inter = int(np.sum(a & b))
    total = int(a.sum() + b.sum())
    union = int(np.sum(a | b))
    if total == 0:
        return 1.0, 1.0
    return 2 * inter / total, inter / union


def task_metrics(kind: str, predictions: np.ndarray, targets: np.ndarray, num_classes: int = 0) -> dict[str, float]:
    """Names and values reported per task; the order is the CSV order."""
    if kind == "classification":
        acc, f1 = accuracy_macro_f1(predictions.argmax(axis=-1), targets, num_classes)
        return {"accuracy": acc, "macro_f1": f1}
    if kind == "segmentation":
        pairs = [dice_iou((p > 0).astype(np.float64), t) for p, t in zip(predictions, targets)]
        return {"dice": float(np.mean([d for d, _ in pairs])), "iou": float(np.mean([i for _, i in pairs]))}
    if kind == "super_resolution":
        clipped = np.clip(predictions, 0.0, 1.0)
        return {"psnr": float(np.mean([psnr(p, t) for p, t in zip(clipped, targets)])),
                "ssim": float(np.mean([ssim(p, t) for p, t in zip(clipped, targets)]))}
    raise ContractError(f"unknown task kind {kind!r}")


METRIC_NAMES = {
    "classification": ("accuracy", "macro_f1"),
    "segmentation": ("dice", "iou"),
    "super_resolution": ("psnr", "ssim"),
}
