"""Boundary-skeleton weight maps and the weighted Dice loss."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateDatasetError, DimensionError, ParameterError
from .morphology import as_mask, euclidean_distance_transform, extract_boundary, zhang_suen_skeleton
from .tensor import Node


@dataclass(frozen=True)
class WeightMap:
    weights: np.ndarray
    alpha: float
    digest: str
    empty: bool = False  # mask had no foreground: nothing to weight
    inverted: bool = False


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")


def mask_digest(mask: np.ndarray, alpha: float, inverted: bool = False) -> str:
    m = as_mask(mask)
    h = hashlib.sha256()
    h.update(np.asarray(m.shape, dtype="<u4").tobytes())
    h.update(np.packbits(m).tobytes())
    h.update(np.float64(alpha).tobytes())
    h.update(b"inv" if inverted else b"std")
    return h.hexdigest()


def skeleton_for_weights(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen skeleton; if thinning erases everything, fall back to the
    foreground pixels farthest from the background."""
    m = as_mask(mask)
    skel = zhang_suen_skeleton(m)
    if skel.any() or not m.any():
        return skel
    depth = euclidean_distance_transform(~m) if (~m).any() else np.ones(m.shape)
    depth = np.where(m, depth, -1.0)
    return depth == depth.max()


def weight_map(mask, alpha: float, invert: bool = False) -> WeightMap:
    """Per-pixel weights rising from 1 on the skeleton to ``alpha`` on the boundary.

    Inside the foreground ``w = alpha - (alpha - 1) * dE / (dS + dE)`` with dE,
    dS the Euclidean distances to the inner contour and to the skeleton.
    Pixels lying on both (1-pixel-wide structure) get 1. Background is 1.
    ``invert`` swaps the roles (skeleton alpha, boundary 1).
    """
    if not alpha >= 1:
        raise ParameterError(f"alpha must be >= 1, got {alpha}")
    m = as_mask(mask)
    w = np.ones(m.shape)
    digest = mask_digest(m, alpha, invert)
    if not m.any():
        return WeightMap(w, float(alpha), digest, empty=True, inverted=invert)
    d_e = euclidean_distance_transform(extract_boundary(m))
    d_s = euclidean_distance_transform(skeleton_for_weights(m))
    total = d_s + d_e
    near = d_e if not invert else d_s
    ratio = np.divide(near, total, out=np.zeros_like(total), where=total > 0)
    inside = np.where(total > 0, alpha - (alpha - 1.0) * ratio, 1.0)
    w[m] = inside[m]
    return WeightMap(w, float(alpha), digest, inverted=invert)


def uniform_map(mask) -> WeightMap:
    m = as_mask(mask)
    return WeightMap(np.ones(m.shape), 1.0, mask_digest(m, 1.0))


def weighted_dice(pred: Node, gt, w, eps: float = 1e-6, per_sample: bool = False) -> Node:
    """``1 - (2 sum w p g + eps) / (sum w p + sum w g + eps)``.

    With ``per_sample`` the leading axis indexes samples and a vector of
    per-sample losses is returned; otherwise all elements form one sum.
    """
    gt = np.asarray(gt, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape != w.shape:
        raise DimensionError(f"weighted_dice shape mismatch: pred {pred.shape}, gt {gt.shape}, w {w.shape}")
    p = pred.value
    axes = tuple(range(1, p.ndim)) if per_sample else None
    inter = np.sum(w * p * gt, axis=axes)
    denom = np.sum(w * p, axis=axes) + np.sum(w * gt, axis=axes) + eps
    num = 2.0 * inter + eps
    loss = 1.0 - num / denom
    return pred.tape._record(
        np.asarray(loss, dtype=np.float64),
        "weighted_dice",
        (pred.id,),
        {"gt": gt, "w": w, "num": num, "denom": denom, "per_sample": per_sample},
    )


@T.register("weighted_dice")
def _weighted_dice_bw(node, g, p):
    s = node.saved
    gt, w, num, denom = s["gt"], s["w"], s["num"], s["denom"]
    if s["per_sample"]:
        shape = (-1,) + (1,) * (p.ndim - 1)
        num, denom, g = num.reshape(shape), denom.reshape(shape), np.asarray(g).reshape(shape)
    # quotient rule on 1 - N/D with dN/dp = 2 w g, dD/dp = w
    dl = -(2.0 * w * gt * denom - num * w) / (denom * denom)
    return (g * dl,)


def weighted_dice_loss(pred, gt, wmap: WeightMap | np.ndarray, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Scalar loss and its gradient with respect to ``pred``."""
    weights = wmap.weights if isinstance(wmap, WeightMap) else np.asarray(wmap, float)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != np.shape(gt) or pred.shape != weights.shape:
        raise DimensionError(f"shape mismatch: pred {pred.shape}, gt {np.shape(gt)}, w {weights.shape}")
    tape = T.Tape()
    p = tape.leaf(pred)
    loss = weighted_dice(p, gt, weights, cfg.epsilon)
    tape.backward(loss)
    return float(loss.value), p.grad


def recommend_alpha(masks) -> float:
    """Dataset background-to-foreground pixel ratio."""
    fg = bg = 0
    for m in masks:
        m = as_mask(m)
        f = int(m.sum())
        fg += f
        bg += m.size - f
    if fg == 0:
        raise DegenerateDatasetError("no foreground pixels in any mask")
    return bg / fg


def heatmap_rgb(wmap: WeightMap) -> np.ndarray:
    """Linear blue (weight 1) to red (weight alpha) colormap, uint8 H x W x 3."""
    span = wmap.alpha - 1.0
    t = np.zeros_like(wmap.weights) if span <= 0 else (wmap.weights - 1.0) / span
    t = np.clip(t, 0.0, 1.0)
    rgb = np.zeros(wmap.weights.shape + (3,))
    rgb[..., 0] = 255.0 * t
    rgb[..., 2] = 255.0 * (1.0 - t)
    return np.rint(rgb).astype(np.uint8)
