"""Segmentation metrics for tubular structures: mIoU, Dice, clDice, ASSD.

Empty-set conventions: IoU and Dice of two empty sets are 1. clDice uses the
mask itself as its centreline when thinning leaves nothing (tiny blobs), so
every non-empty mask scores perfectly against itself.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, UndefinedSurfaceError
from .morphology import as_mask, euclidean_distance_transform, extract_boundary, zhang_suen_skeleton


@dataclass(frozen=True)
class MetricReport:
    miou: float
    dice: float
    cldice: float
    assd: float

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(pred, gt):
    p, g = as_mask(pred), as_mask(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} differs from ground truth {g.shape}")
    return p, g


def _iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def miou(pred, gt) -> float:
    """Mean IoU over the background and foreground classes."""
    p, g = _pair(pred, gt)
    return 0.5 * (_iou(p, g) + _iou(~p, ~g))


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum() + g.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def centreline(mask) -> np.ndarray:
    m = as_mask(mask)
    skel = zhang_suen_skeleton(m)
    return skel if skel.any() else m.copy()


def cl_dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    sp, sg = centreline(p), centreline(g)
    # an empty skeleton only happens for an empty mask here
    tprec = 1.0 if not sp.any() else float(np.logical_and(sp, g).sum() / sp.sum())
    tsens = 1.0 if not sg.any() else float(np.logical_and(sg, p).sum() / sg.sum())
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def assd(pred, gt) -> float:
    """Average symmetric distance between the inner contours, in pixels."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise UndefinedSurfaceError("ASSD needs non-empty prediction and ground truth")
    bp, bg = extract_boundary(p), extract_boundary(g)
    to_g = euclidean_distance_transform(bg)[bp]
    to_p = euclidean_distance_transform(bp)[bg]
    return float((to_g.sum() + to_p.sum()) / (bp.sum() + bg.sum()))


def evaluate(pred, gt) -> MetricReport:
    """All four metrics; ASSD is NaN where it is undefined."""
    try:
        a = assd(pred, gt)
    except UndefinedSurfaceError:
        a = float("nan")
    return MetricReport(miou(pred, gt), dice(pred, gt), cl_dice(pred, gt), a)
