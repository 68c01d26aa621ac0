"""Binary-mask geometry: inner contour, Zhang-Suen thinning, exact EDT."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EmptySourceError


def as_mask(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"binary mask must be a non-empty H x W array, got shape {m.shape}")
    return m


def extract_boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background.

    Pixels outside the image count as background, so foreground touching the
    image border is always boundary.
    """
    m = as_mask(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _neighbours(img: np.ndarray) -> list[np.ndarray]:
    # P2..P9 clockwise from north, on a 1-padded image
    c = img
    return [
        c[:-2, 1:-1],  # P2 N
        c[:-2, 2:],  # P3 NE
        c[1:-1, 2:],  # P4 E
        c[2:, 2:],  # P5 SE
        c[2:, 1:-1],  # P6 S
        c[2:, :-2],  # P7 SW
        c[1:-1, :-2],  # P8 W
        c[:-2, :-2],  # P9 NW
    ]


def zhang_suen_skeleton(mask) -> np.ndarray:
    """Classic two-subiteration Zhang-Suen thinning, run to a fixpoint."""
    m = as_mask(mask)
    img = np.pad(m.astype(np.uint8), 1)
    core = img[1:-1, 1:-1]
    while True:
        changed = False
        for step in (0, 1):
            p2, p3, p4, p5, p6, p7, p8, p9 = _neighbours(img)
            ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9
            a = np.zeros_like(b)
            for u, v in zip(ring[:-1], ring[1:]):
                a += (u == 0) & (v == 1)
            if step == 0:
                cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            delete = (core == 1) & (b >= 2) & (b <= 6) & (a == 1) & cond
            if delete.any():
                core[delete] = 0
                changed = True
        if not changed:
            return core.astype(bool)


def _column_distance(src: np.ndarray) -> np.ndarray:
    """Per-column distance to the nearest source in the same column; -1 if none."""
    h, w = src.shape
    big = h + w + 1
    d = np.full((h, w), big, dtype=np.int64)
    run = np.full(w, big, dtype=np.int64)
    for y in range(h):
        run = np.where(src[y], 0, np.minimum(run + 1, big))
        d[y] = run
    run = np.full(w, big, dtype=np.int64)
    for y in range(h - 1, -1, -1):
        run = np.where(src[y], 0, np.minimum(run + 1, big))
        d[y] = np.minimum(d[y], run)
    d[d >= big] = -1
    return d


def _envelope_row(f: list, n: int) -> list[int]:
    """min over q of (p - q)^2 + f[q] for every p, f[q] None meaning no source.

    Lower envelope of parabolas; breakpoints kept as exact integer fractions
    so the result is exact.
    """
    v: list[int] = []
    z: list = []  # left breakpoint of v[k] as (num, den), den > 0; None = -inf
    for q in range(n):
        fq = f[q]
        if fq is None:
            continue
        num = den = 0
        while v:
            p = v[-1]
            num = fq + q * q - f[p] - p * p
            den = 2 * (q - p)
            zl = z[-1]
            if zl is not None and num * zl[1] <= zl[0] * den:
                v.pop()
                z.pop()
            else:
                break
        z.append((num, den) if v else None)
        v.append(q)
    out = [0] * n
    k = 0
    for p in range(n):
        while k + 1 < len(v) and z[k + 1][0] <= p * z[k + 1][1]:
            k += 1
        dq = p - v[k]
        out[p] = dq * dq + f[v[k]]
    return out


def squared_distance_transform(sources) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest source pixel (int64)."""
    src = as_mask(sources)
    if not src.any():
        raise EmptySourceError("distance transform needs at least one source pixel")
    h, w = src.shape
    col = _column_distance(src)
    out = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        row = col[y].tolist()
        f = [None if d < 0 else d * d for d in row]
        out[y] = _envelope_row(f, w)
    return out


def euclidean_distance_transform(sources) -> np.ndarray:
    """Exact Euclidean distance (pixels) from every pixel to the nearest source.

    Two separable passes: a 1-D nearest-source scan down each column, then
    the lower envelope of parabolas along each row.
    """
    return np.sqrt(squared_distance_transform(sources).astype(np.float64))
