"""Overlap, surface-distance and uncertainty metrics plus the paired t-test.

Inputs are numpy arrays (torch tensors are converted). Distances are
reported in mm using the per-axis voxel spacing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _np(a).astype(bool), _np(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    """Dice coefficient; two empty masks count as perfect agreement."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def jaccard(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face neighbour (outside counts as background)."""
    mask = mask.astype(bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


class EmptyMaskError(ValueError):
    pass


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> dict[str, float]:
    """HD95 and MSD (mm) between the boundaries of two nonempty masks.

    MSD is the mean of the two directed mean distances; HD95 is the 95th
    percentile (linear interpolation) of both directed distance sets pooled.
    """
    a, b = _pair(a, b)
    if not a.any():
        raise EmptyMaskError("first mask is empty")
    if not b.any():
        raise EmptyMaskError("second mask is empty")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(a)) * sp
    pb = np.argwhere(boundary(b)) * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    pooled = np.concatenate([d_ab, d_ba])
    return {
        "hd95": float(np.percentile(pooled, 95)),
        "msd": float(0.5 * (d_ab.mean() + d_ba.mean())),
    }


def hard_labels(probs) -> np.ndarray:
    """Argmax over the class axis (-4); ties go to the lowest index."""
    return _np(probs).argmax(axis=-4)


@dataclass
class RegionMetrics:
    dsc: float
    jac: float
    hd95: float
    msd: float
    empty: bool = False


def region_metrics(pred_labels, gt_labels, num_classes: int, spacing) -> dict[int, RegionMetrics]:
    """Per foreground class metrics between two label grids."""
    pred, gt = _np(pred_labels), _np(gt_labels)
    out = {}
    for k in range(1, num_classes):
        a, b = pred == k, gt == k
        empty = not (a.any() and b.any())
        if empty:
            # one side vanished: overlap is 0 (or 1 if both) and distances undefined
            d = {"hd95": float("nan"), "msd": float("nan")}
        else:
            d = surface_distances(a, b, spacing)
        out[k] = RegionMetrics(dsc(a, b), jaccard(a, b), d["hd95"], d["msd"], empty)
    return out


def uncertainty_in_region(entropy, region) -> dict:
    """Entropy values inside ``region`` plus mean/median/quartile summary."""
    e, r = _np(entropy), _np(region).astype(bool)
    if e.shape != r.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {r.shape}")
    if not r.any():
        raise ValueError("region is empty")
    values = e[r].astype(np.float64)
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {
        "values": values,
        "mean": float(values.mean()),
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
    }


@dataclass
class TTestResult:
    t: float
    dof: int
    p: float
    degenerate: bool = False


def paired_t_test(x, y) -> TTestResult:
    """Two-sided paired t-test on x - y."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = x - y
    sd = d.std(ddof=1)
    mean = d.mean()
    if sd == 0:
        return TTestResult(t=float("nan"), dof=n - 1, p=float("nan"), degenerate=True)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(t=float(t), dof=n - 1, p=float(min(p, 1.0)))
