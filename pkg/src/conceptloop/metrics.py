"""Segmentation metrics: per-sample records and mergeable dataset accumulators.

Conventions:
  * IoU/Dice use the binarized prediction; two empty masks score 1.
  * BER classes with a zero denominator contribute 0.
  * F-beta-w (weighted F-measure) and S-measure run on the soft prediction.
  * mIoU is foreground-only per-sample IoU averaged over samples (equal to gIoU).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import numerics as nx

_EPS = np.finfo(np.float64).eps
METRIC_COLUMNS = ("MAE", "BER", "F_beta_w", "S_m", "mIoU", "mDice", "gIoU", "cIoU")
MIOU_CONVENTION = "foreground-only per-sample IoU averaged over samples"


@dataclass(frozen=True)
class SampleMetrics:
    mae: float
    ber: float
    iou: float
    dice: float
    wfm: float
    sm: float
    inter: int = 0
    union: int = 0


def confusion(pred_bin: np.ndarray, gt_bin: np.ndarray) -> tuple[int, int, int, int]:
    tp = int(np.count_nonzero(pred_bin & gt_bin))
    fp = int(np.count_nonzero(pred_bin & ~gt_bin))
    fn = int(np.count_nonzero(~pred_bin & gt_bin))
    tn = int(pred_bin.size - tp - fp - fn)
    return tp, fp, fn, tn


def balanced_error_rate(tp: int, fp: int, fn: int, tn: int) -> float:
    fnr = fn / (tp + fn) if tp + fn else 0.0
    fpr = fp / (tn + fp) if tn + fp else 0.0
    return 0.5 * (fnr + fpr)


def _gauss_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < _EPS * k.max()] = 0
    return k / k.sum()


_GAUSS = _gauss_kernel()


def weighted_fmeasure(pred: np.ndarray, gt: np.ndarray, beta2: float = 1.0) -> float:
    gt = gt.astype(bool)
    if not gt.any():
        return float(1.0 - pred.mean())
    dist, idx = ndimage.distance_transform_edt(~gt, return_indices=True)
    err = np.abs(pred - gt)
    err_t = err.copy()
    bg = ~gt
    err_t[bg] = err_t[idx[0][bg], idx[1][bg]]
    ea = ndimage.convolve(err_t, _GAUSS, mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    weight = np.where(bg, 2.0 - np.exp(np.log(0.5) / 5.0 * dist), 1.0)
    ew = min_e * weight
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[bg].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw + _EPS)
    q = (1.0 + beta2) * recall * precision / (recall + beta2 * precision + _EPS)
    return float(min(1.0, max(0.0, q)))


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    vals = pred[gt]
    if vals.size == 0:
        return 0.0
    x = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray, weight: np.ndarray) -> float:
    """Structural similarity with per-pixel weights (weighted moments)."""
    total = weight.sum()
    x = (weight * pred).sum() / total
    y = (weight * gt).sum() / total
    sx = (weight * (pred - x) ** 2).sum() / total
    sy = (weight * (gt - y) ** 2).sum() / total
    sxy = (weight * (pred - x) * (gt - y)).sum() / total
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def _side_weights(n: int, cut: float) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of each pixel [i, i+1) lying before / after ``cut``."""
    before = np.clip(cut - np.arange(n), 0.0, 1.0)
    return before, 1.0 - before


def _region(pred: np.ndarray, gt: np.ndarray) -> float:
    # split at the continuous centroid (pixel edges at integers); straddling
    # pixels are shared fractionally so that upsampling leaves the score unchanged
    h, w = gt.shape
    ys, xs = np.nonzero(gt)
    top, bottom = _side_weights(h, ys.mean() + 0.5)
    left, right = _side_weights(w, xs.mean() + 0.5)
    g = gt.astype(np.float64)
    score = 0.0
    for rw in (top, bottom):
        for cw in (left, right):
            weight = np.outer(rw, cw)
            if weight.sum() > _EPS:
                score += weight.sum() / (h * w) * _ssim(pred, g, weight)
    return score


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    gt = gt.astype(bool)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    fg = np.where(gt, pred, 0.0)
    bg = np.where(~gt, 1.0 - pred, 0.0)
    obj = y * _s_object(fg, gt) + (1.0 - y) * _s_object(bg, ~gt)
    sm = alpha * obj + (1.0 - alpha) * _region(pred, gt)
    return float(min(1.0, max(0.0, sm)))


def sample_metrics(pred, gt, theta: float = 0.5) -> SampleMetrics:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise nx.ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    gtb = gt >= 0.5
    pb = pred >= theta
    tp, fp, fn, tn = confusion(pb, gtb)
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    dice = 2 * tp / (2 * tp + fp + fn) if union else 1.0
    return SampleMetrics(
        mae=float(np.mean(np.abs(pred - gtb))),
        ber=balanced_error_rate(tp, fp, fn, tn),
        iou=iou,
        dice=dice,
        wfm=weighted_fmeasure(pred, gtb),
        sm=s_measure(pred, gtb),
        inter=tp,
        union=union,
    )


_SUM_FIELDS = ("mae", "ber", "iou", "dice", "wfm", "sm")


@dataclass(frozen=True)
class MetricAccumulator:
    n: int = 0
    sums: tuple[float, ...] = (0.0,) * 6
    cum_intersection: float = 0.0
    cum_union: float = 0.0

    def finalize(self) -> dict[str, float]:
        if self.n == 0:
            return {c: float("nan") for c in METRIC_COLUMNS}
        m = dict(zip(_SUM_FIELDS, (s / self.n for s in self.sums)))
        ciou = self.cum_intersection / self.cum_union if self.cum_union > 0 else 1.0
        return {"MAE": m["mae"], "BER": m["ber"], "F_beta_w": m["wfm"], "S_m": m["sm"],
                "mIoU": m["iou"], "mDice": m["dice"], "gIoU": m["iou"], "cIoU": ciou}


def accumulate(acc: MetricAccumulator, s: SampleMetrics, inter: float | None = None,
               union: float | None = None) -> MetricAccumulator:
    inter = s.inter if inter is None else inter
    union = s.union if union is None else union
    if inter > union:
        raise nx.ContractError(f"intersection {inter} exceeds union {union}")
    vals = tuple(getattr(s, f) for f in _SUM_FIELDS)
    return MetricAccumulator(acc.n + 1, tuple(a + v for a, v in zip(acc.sums, vals)),
                             acc.cum_intersection + inter, acc.cum_union + union)


def merge(a: MetricAccumulator, b: MetricAccumulator) -> MetricAccumulator:
    return MetricAccumulator(a.n + b.n, tuple(x + y for x, y in zip(a.sums, b.sums)),
                             a.cum_intersection + b.cum_intersection,
                             a.cum_union + b.cum_union)


def as_percent(row: dict[str, float]) -> dict[str, float]:
    return {k: round(100.0 * v, 2) for k, v in row.items()}


def write_metric_csv(path: Path, rows: list[dict], key_columns: list[str]) -> None:
    path = Path(path)
    cols = key_columns + [c for c in rows[0] if c not in key_columns] if rows else key_columns
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")
