"""Detection/localization metrics and score-map post-processing.

All ranking metrics treat larger scores as more anomalous and are invariant
under strictly increasing transforms. AUROC counts ties as half-correct; AP
processes tied scores as one block; F1max places thresholds at every distinct
score (predict positive when score >= threshold); PRO integrates the mean
per-region overlap against the false-positive rate up to a limit and
normalizes by that limit.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from dmad.errors import ValidationError
from dmad.interp import bilinear_resize


def image_score(patch_scores: np.ndarray) -> float:
    """Mean of the five largest patch scores (all of them when fewer)."""
    scores = np.asarray(patch_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValidationError("patch score set must be nonempty")
    if scores.size <= 5:
        return float(scores.mean())
    top = np.partition(scores, scores.size - 5)[-5:]
    return float(top.mean())


def pixel_map(
    patch_scores: np.ndarray, h: int, w: int, blur_sigma: float
) -> np.ndarray:
    """Upsample a patch-score grid to image resolution and Gaussian-smooth it.

    Bilinear upsampling uses the pixel-center convention; the blur kernel is
    truncated at four standard deviations with reflect padding. ``blur_sigma``
    of zero skips the blur.
    """
    grid = np.asarray(patch_scores, dtype=np.float64)
    if grid.ndim != 2:
        raise ValidationError(f"patch scores must be 2-D, got shape {grid.shape}")
    if h < grid.shape[0] or w < grid.shape[1]:
        raise ValidationError(
            f"target {h}x{w} is smaller than the patch grid {grid.shape[0]}x{grid.shape[1]}"
        )
    if blur_sigma < 0:
        raise ValidationError("blur_sigma must be non-negative")
    up = bilinear_resize(grid, h, w)
    if blur_sigma == 0:
        return up
    if np.ptp(up) == 0.0:
        return up.copy()  # blur of a constant field is the identity
    return ndimage.gaussian_filter(up, sigma=blur_sigma, mode="reflect", truncate=4.0)


def _check_binary_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels).ravel()
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return labels.astype(bool)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _check_binary_labels(labels)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _descending_blocks(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) at each distinct score, scanned from the top."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.int64)
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.append(boundary, s.size - 1)
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return tp, fp


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step integration of the precision-recall curve, ties as one block."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _check_binary_labels(labels)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("average precision needs at least one positive")
    tp, fp = _descending_blocks(scores, labels)
    precision = tp / (tp + fp)
    delta_tp = np.diff(np.concatenate(([0], tp)))
    return float((delta_tp * precision).sum() / n_pos)


def f1max(scores: np.ndarray, labels: np.ndarray) -> float:
    """Maximum F1 over thresholds at every distinct score value."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _check_binary_labels(labels)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("F1max needs at least one positive")
    tp, fp = _descending_blocks(scores, labels)
    fn = n_pos - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return float(f1.max())


def pro(
    pixel_maps: list[np.ndarray],
    gt_masks: list[np.ndarray],
    fpr_limit: float = 0.3,
    connectivity: int = 8,
) -> float:
    """Per-region-overlap score integrated over false-positive rates.

    Connected components of each ground-truth mask define the regions. For
    every distinct score threshold (prediction = score >= threshold) the curve
    collects the mean per-region recall against the global false-positive rate
    over normal pixels; the curve is integrated by trapezoid up to
    ``fpr_limit`` (with interpolation at the crossing) and normalized by it.
    """
    if len(pixel_maps) != len(gt_masks) or not pixel_maps:
        raise ValidationError("need matching, nonempty map and mask lists")
    if not (0.0 < fpr_limit <= 1.0):
        raise ValidationError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=int)
    elif connectivity == 4:
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    else:
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")

    region_scores: list[np.ndarray] = []
    normal_scores: list[np.ndarray] = []
    for amap, mask in zip(pixel_maps, gt_masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask)
        if amap.shape != mask.shape:
            raise ValidationError(f"map {amap.shape} and mask {mask.shape} shapes disagree")
        labeled, n_regions = ndimage.label(mask > 0, structure=structure)
        for r in range(1, n_regions + 1):
            region_scores.append(np.sort(amap[labeled == r]))
        normal_scores.append(amap[mask == 0])
    if not region_scores:
        raise ValidationError("no anomalous regions in any mask")
    normal_sorted = np.sort(np.concatenate(normal_scores))
    if normal_sorted.size == 0:
        raise ValidationError("no normal pixels to measure the false-positive rate")

    thresholds = np.unique(np.concatenate([np.concatenate(region_scores), normal_sorted]))[::-1]
    overlaps = np.zeros(thresholds.size)
    for rs in region_scores:
        # count of region pixels with score >= threshold
        ge = rs.size - np.searchsorted(rs, thresholds, side="left")
        overlaps += ge / rs.size
    overlaps /= len(region_scores)
    fpr = (
        normal_sorted.size - np.searchsorted(normal_sorted, thresholds, side="left")
    ) / normal_sorted.size

    # Anchor at threshold above the maximum: empty prediction.
    fpr = np.concatenate(([0.0], fpr))
    overlaps = np.concatenate(([0.0], overlaps))

    if fpr[-1] < fpr_limit:
        limit = fpr[-1]
        fpr_cut, overlap_cut = fpr, overlaps
    else:
        limit = fpr_limit
        last = int(np.searchsorted(fpr, fpr_limit, side="left"))
        fpr_cut = fpr[: last + 1].copy()
        overlap_cut = overlaps[: last + 1].copy()
        if fpr[last] > fpr_limit:
            # interpolate the overlap at the crossing
            f0, f1_ = fpr[last - 1], fpr[last]
            o0, o1 = overlaps[last - 1], overlaps[last]
            t = (fpr_limit - f0) / (f1_ - f0)
            fpr_cut[-1] = fpr_limit
            overlap_cut[-1] = o0 + t * (o1 - o0)
    if limit == 0.0:
        return float(overlap_cut[-1])
    return float(np.trapezoid(overlap_cut, fpr_cut) / fpr_limit)
