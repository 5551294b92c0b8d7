"""Camouflaged-object evaluation metrics: S-measure, E-measure, weighted F-measure, MAE.

Predictions are ``[0, 1]`` float maps, ground truths binary masks of the same
shape. Degenerate masks and thresholds follow the widely used py_sod_metrics
conventions; the individual functions note where they apply.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionError
from .ops import interpolation_matrix

_EPS = np.spacing(1.0)


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise DimensionError(f"prediction {pred.shape} and mask {gt.shape} must be equal 2-D shapes")
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


# -- S-measure ---------------------------------------------------------------
def _object_similarity(x: np.ndarray, region: np.ndarray) -> float:
    vals = x[region]
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma)  # denominator >= 1


def _object_score(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _object_similarity(pred * gt, gt)
    bg = _object_similarity((1.0 - pred) * ~gt, ~gt)
    return u * fg + (1.0 - u) * bg


def _block_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x = pred.mean()
    y = gt.mean()
    sx = np.sum((pred - x) ** 2) / (n - 1 + _EPS)
    sy = np.sum((gt - y) ** 2) / (n - 1 + _EPS)
    sxy = np.sum((pred - x) * (gt - y)) / (n - 1 + _EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:  # implies both variances are positive, so beta > 0
        return alpha / beta
    return 1.0 if beta == 0 else 0.0


def _region_score(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cy, cx = np.argwhere(gt).mean(axis=0).round()
    # split after the (1-based) centroid row/column
    y, x = int(cy) + 1, int(cx) + 1
    total = 0.0
    for rows in (slice(0, y), slice(y, h)):
        for cols in (slice(0, x), slice(x, w)):
            p, g = pred[rows, cols], gt[rows, cols].astype(np.float64)
            if p.size:
                total += p.size * _block_ssim(p, g)
    return total / (h * w)


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: object-aware and region-aware similarity.

    Empty ground truth scores ``1 - mean(P)``; full ground truth ``mean(P)``.
    Quadrant weights are applied as ``area_k / area`` sums, so a perfect
    prediction scores exactly 1.
    """
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        score = 1.0 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        score = alpha * _object_score(pred, gt) + (1.0 - alpha) * _region_score(pred, gt)
    return float(min(max(score, 0.0), 1.0))


# -- E-measure ---------------------------------------------------------------
def adaptive_binarize(pred: np.ndarray) -> np.ndarray:
    """Threshold at ``min(2 * mean(P), 1)``; an all-zero map stays all background."""
    thr = min(2.0 * float(pred.mean()), 1.0)
    return pred >= thr if thr > 0 else pred > 0


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure of the adaptively binarized prediction.

    The enhanced alignment matrix takes only four distinct values (one per
    prediction/ground-truth class pair), so it is summed from pixel counts.
    The sum is divided by the pixel count, so the score lies in ``[0, 1]``.
    """
    pred, gt = _prepare(pred, gt)
    fm = adaptive_binarize(pred)
    n = gt.size
    n_gt = int(gt.sum())
    if n_gt == 0:
        return float(np.count_nonzero(~fm) / n)
    if n_gt == n:
        return float(np.count_nonzero(fm) / n)
    mu_fm = np.count_nonzero(fm) / n
    mu_gt = n_gt / n
    total = 0.0
    for fm_val in (True, False):
        for gt_val in (True, False):
            count = np.count_nonzero((fm == fm_val) & (gt == gt_val))
            if not count:
                continue
            a = float(fm_val) - mu_fm
            b = float(gt_val) - mu_gt
            align = 2.0 * a * b / (a * a + b * b)  # b != 0 because the mask is mixed
            total += count * (align + 1.0) ** 2 / 4.0
    return float(total / n)


# -- weighted F-measure --------------------------------------------------------
def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2.0
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    k[k < np.finfo(np.float64).eps * k.max()] = 0
    return k / k.sum()


def _lattice_offsets(n: int) -> np.ndarray:
    """Integer ``(dy, dx)`` with ``dy^2 + dx^2 == n``, sorted by ``(dy, dx)``."""
    r = math.isqrt(n)
    dy = np.arange(-r, r + 1)
    rem = n - dy * dy
    dx = np.sqrt(rem).round().astype(np.int64)
    ok = dx * dx == rem
    dy, dx = dy[ok], dx[ok]
    pairs = np.concatenate([np.stack([dy, -dx], 1), np.stack([dy, dx], 1)])
    pairs = np.unique(pairs, axis=0)  # unique sorts lexicographically by (dy, dx)
    return pairs


def nearest_foreground(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Euclidean distance to, and row/column of, the nearest foreground pixel.

    Among equidistant candidates the one with the smallest row-major index is
    chosen. Foreground pixels map to themselves at distance 0.
    """
    h, w = gt.shape
    dist = ndimage.distance_transform_edt(~gt)
    sq = np.rint(dist * dist).astype(np.int64)
    iy, ix = np.indices(gt.shape)
    ny, nx = iy.copy(), ix.copy()
    bg_y, bg_x = np.nonzero(~gt)
    if bg_y.size == 0:
        return np.sqrt(sq), ny, nx
    bg_sq = sq[bg_y, bg_x]
    order = np.argsort(bg_sq, kind="stable")
    bg_y, bg_x, bg_sq = bg_y[order], bg_x[order], bg_sq[order]
    starts = np.flatnonzero(np.r_[True, bg_sq[1:] != bg_sq[:-1]])
    ends = np.r_[starts[1:], bg_sq.size]
    for s, e in zip(starts, ends):
        py, px = bg_y[s:e], bg_x[s:e]
        pending = np.ones(e - s, dtype=bool)
        for dy, dx in _lattice_offsets(int(bg_sq[s])):
            ty, tx = py + dy, px + dx
            hit = pending & (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            hit[hit] = gt[ty[hit], tx[hit]]
            ny[py[hit], px[hit]] = ty[hit]
            nx[py[hit], px[hit]] = tx[hit]
            pending &= ~hit
            if not pending.any():
                break
    return np.sqrt(sq), ny, nx


def weighted_f(pred, gt, beta2: float = 1.0) -> float:
    """Weighted F-measure with Gaussian error dependency and distance-based importance.

    Errors at background pixels are propagated from their nearest foreground
    pixel, smoothed by a 7x7 Gaussian (sigma 5, zero padding); false positives
    are up-weighted with distance from the object. An empty ground truth
    scores ``1 - mean(P)``.
    """
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return float(1.0 - pred.mean())
    err = np.abs(pred - gt)
    dist, ny, nx = nearest_foreground(gt)
    et = err[ny, nx]
    ea = ndimage.convolve(et, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tp = gt.sum() - ew[gt].sum()
    fp = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    denom = recall + beta2 * precision
    q = (1.0 + beta2) * recall * precision / denom if denom > 0 else 0.0
    return float(min(max(q, 0.0), 1.0))


# -- dataset evaluation ----------------------------------------------------------
@dataclass
class MetricReport:
    s_measure: float
    e_measure: float
    weighted_f: float
    mae: float
    count: int
    rows: list[dict] = field(default_factory=list, repr=False)
    errors: list[str] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d


def evaluate_pair(pred, gt) -> dict[str, float]:
    return {
        "s_measure": s_measure(pred, gt),
        "e_measure": e_measure(pred, gt),
        "weighted_f": weighted_f(pred, gt),
        "mae": mae(pred, gt),
    }


def aggregate(rows: list[dict], errors: list[str] | None = None) -> MetricReport:
    if not rows:
        raise ValueError("no prediction/mask pairs to evaluate")
    keys = ("s_measure", "e_measure", "weighted_f", "mae")
    means = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return MetricReport(count=len(rows), rows=list(rows), errors=list(errors or []), **means)


def read_gray(path: Path) -> np.ndarray:
    """8-bit grayscale image as floats in ``[0, 1]``."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def resize_map(x: np.ndarray, size: tuple[int, int], mode: str = "bicubic") -> np.ndarray:
    if x.shape == tuple(size):
        return x
    mh = interpolation_matrix(x.shape[0], size[0], mode)
    mw = interpolation_matrix(x.shape[1], size[1], mode)
    return mh @ x @ mw.T


def evaluate_dataset(pred_dir, gt_dir) -> MetricReport:
    """Average the four metrics over ``<stem>.png`` pairs found in both directories.

    Masks are binarized at ``> 127``; predictions are resized bicubically to the
    mask resolution when they differ. Unmatched files are listed in
    ``report.errors`` and skipped.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    errors = [f"missing mask for prediction {s}" for s in sorted(set(preds) - set(gts))]
    errors += [f"missing prediction for mask {s}" for s in sorted(set(gts) - set(preds))]
    rows = []
    for stem in sorted(set(preds) & set(gts)):
        try:
            gt = read_gray(gts[stem]) > 127 / 255.0
            pred = np.clip(resize_map(read_gray(preds[stem]), gt.shape), 0.0, 1.0)
        except OSError as exc:
            errors.append(f"{stem}: {exc}")
            continue
        rows.append({"name": stem, **evaluate_pair(pred, gt)})
    return aggregate(rows, errors)


def write_report(report: MetricReport, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (one row per image) and ``<path>.json`` (aggregate)."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".csv") else path
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "s_measure", "e_measure", "weighted_f", "mae"])
        writer.writeheader()
        writer.writerows(report.rows)
    json_path.write_text(json.dumps(report.summary(), indent=2))
    return csv_path, json_path
