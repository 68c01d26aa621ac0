"""Procedural tubular masks and degraded low-resolution inputs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .imageio import write_gray, write_mask


@dataclass(frozen=True)
class TubeSpec:
    height: int = 64
    width: int = 64
    tubes: int = 3
    width_min: int = 2
    width_max: int = 4
    curvature: float = 0.25  # cubic-term amplitude as a fraction of the image size
    branch_prob: float = 0.3
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ParameterError(f"image size must be at least 2 x 2, got {self.height} x {self.width}")
        if self.tubes < 0:
            raise ParameterError("tube count must be non-negative")
        if self.width_min < 1 or self.width_max < self.width_min:
            raise ParameterError(f"invalid width range [{self.width_min}, {self.width_max}]")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise ParameterError(f"branch probability must be in [0, 1], got {self.branch_prob}")
        if self.noise_sigma < 0 or self.curvature < 0:
            raise ParameterError("noise sigma and curvature must be non-negative")
        if self.seed < 0:
            raise ParameterError("seed must be non-negative")


def draw_tube(mask: np.ndarray, axis: str, coeffs, start: float, end: float, w0: float, w1: float) -> None:
    """Rasterise one tube in place.

    The tube advances along ``axis`` ('h' for columns, 'v' for rows) from
    ``start`` to ``end``; its centre on the other axis is the cubic
    ``coeffs[0] + coeffs[1] t + coeffs[2] t^2 + coeffs[3] t^3`` with
    t in [0, 1], and its stroke width varies linearly from ``w0`` to ``w1``.
    Each line across the tube gets one contiguous run covering the centre
    over the half-pixel either side, so the tube stays 4-connected.
    """
    m = mask if axis == "h" else mask.T
    n_across, n_along = m.shape
    span = max(end - start, 1e-9)
    a0, a1, a2, a3 = coeffs

    def centre(u):
        t = min(max((u - start) / span, 0.0), 1.0)
        return a0 + t * (a1 + t * (a2 + t * a3)), t

    lo_u = max(int(math.ceil(start)), 0)
    hi_u = min(int(math.floor(end)), n_along - 1)
    for u in range(lo_u, hi_u + 1):
        c_a, _ = centre(u - 0.5)
        c_b, _ = centre(u + 0.5)
        _, t = centre(u)
        width = max(1, int(round(w0 + (w1 - w0) * t)))
        half = (width - 1) / 2.0
        lo = int(math.floor(min(c_a, c_b) - half + 0.5))
        hi = int(math.floor(max(c_a, c_b) + half + 0.5))
        lo, hi = max(lo, 0), min(hi, n_across - 1)
        if lo <= hi:
            m[lo : hi + 1, u] = True


def _random_tube(rng, spec: TubeSpec, axis: str):
    n_along = spec.width if axis == "h" else spec.height
    n_across = spec.height if axis == "h" else spec.width
    start = rng.uniform(-0.05, 0.15) * n_along
    end = rng.uniform(0.85, 1.05) * n_along
    a0 = rng.uniform(0.15, 0.85) * n_across
    a1 = rng.uniform(-0.3, 0.3) * n_across
    amp = spec.curvature * n_across
    a2 = rng.normal(0.0, amp)
    a3 = rng.normal(0.0, amp)
    w0 = rng.uniform(spec.width_min, spec.width_max)
    w1 = rng.uniform(spec.width_min, spec.width_max)
    return (a0, a1, a2, a3), start, end, w0, w1


def generate_mask(spec: TubeSpec) -> np.ndarray:
    """Boolean H x W mask of ``spec.tubes`` smooth tubes with optional branches."""
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for _ in range(spec.tubes):
        axis = "h" if rng.random() < 0.5 else "v"
        coeffs, start, end, w0, w1 = _random_tube(rng, spec, axis)
        draw_tube(mask, axis, coeffs, start, end, w0, w1)
        if rng.random() < spec.branch_prob:
            tb = rng.uniform(0.3, 0.7)
            u_b = start + tb * (end - start)
            c_b = coeffs[0] + tb * (coeffs[1] + tb * (coeffs[2] + tb * coeffs[3]))
            other = "v" if axis == "h" else "h"
            n_len = spec.height if other == "v" else spec.width  # extent along the branch axis
            length = rng.uniform(0.25, 0.5) * n_len
            direction = 1.0 if rng.random() < 0.5 else -1.0
            b_start, b_end = (c_b, c_b + length) if direction > 0 else (c_b - length, c_b)
            bend = rng.normal(0.0, 0.5 * spec.curvature * n_len)
            # branch centre starts at the parent centreline on the end that touches it
            b_coeffs = (u_b, 0.0, bend, 0.0) if direction > 0 else (u_b + bend, -2 * bend, bend, 0.0)
            bw = max(spec.width_min, min(w0, w1) - 0.5)
            draw_tube(mask, other, b_coeffs, b_start, b_end, bw, spec.width_min)
    return mask


def expected_ratio(spec: TubeSpec) -> float:
    """Rough expected foreground fraction of :func:`generate_mask` for ``spec``."""
    mean_w = 0.5 * (spec.width_min + spec.width_max)
    side = 0.5 * (spec.height + spec.width)
    per_tube = mean_w * side * 0.95
    branch_w = spec.width_min + 0.25 * (spec.width_max - spec.width_min)
    per_tube += spec.branch_prob * branch_w * 0.375 * side
    return min(1.0, spec.tubes * per_tube / (spec.height * spec.width))


def spec_for_ratio(target: float, base: TubeSpec) -> TubeSpec:
    """Copy of ``base`` with tube count and width range tuned towards ``target``."""
    if not 0 < target < 1:
        raise ParameterError("target foreground ratio must be in (0, 1)")
    spread = base.width_max - base.width_min
    best, best_err = base, math.inf
    for wmin in range(1, 9):
        for tubes in range(1, 64):
            cand = replace(base, tubes=tubes, width_min=wmin, width_max=wmin + spread)
            # prefer widths close to the requested range on near-ties
            err = abs(expected_ratio(cand) / target - 1) + 0.01 * abs(wmin - base.width_min)
            if err < best_err:
                best, best_err = cand, err
    return best


def pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    return img.reshape(img.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))


def render_and_degrade(mask, spec: TubeSpec) -> tuple[np.ndarray, np.ndarray]:
    """(low-resolution input H/2 x W/2, noisy high-resolution target H x W)."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    if h % 2 or w % 2:
        raise ParameterError(f"mask size must be even for 2x degradation, got {h} x {w}")
    target = m.astype(np.float64)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 1])
        target = target + rng.normal(0.0, spec.noise_sigma, target.shape)
    return pool2(target), target


def sample_specs(base: TubeSpec, count: int, seed: int) -> list[TubeSpec]:
    return [replace(base, seed=seed * 100003 + i) for i in range(count)]


def write_dataset(out_dir, base: TubeSpec, count: int) -> list[str]:
    """Emit images/, masks/ and manifest.txt; returns the file stems."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    stems = []
    lines = [f"count = {count}"] + [f"{k} = {v}" for k, v in asdict(base).items()]
    for i, spec in enumerate(sample_specs(base, count, base.seed)):
        stem = f"{i:04d}"
        mask = generate_mask(spec)
        _, target = render_and_degrade(mask, spec)
        write_mask(out / "masks" / f"{stem}.png", mask)
        write_gray(out / "images" / f"{stem}.png", np.clip(target, 0.0, 1.0))
        lines.append(f"image.{stem} = seed {spec.seed}")
        stems.append(stem)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return stems
