"""Dynamic snake upsampling (scale factor 2).

For every parent pixel four subpixel centres are placed at (+-0.25, +-0.25).
A per-sample stride L_odd is chosen from the feature map; around each
subpixel centre an X-type path (unit steps in x, accumulated bounded offsets
in y) and/or a Y-type path (the transpose) of up to L_max points is sampled
bilinearly, taps beyond +-c = +-(L_odd - 1) / 2 are masked, and a depthwise
length-L_max kernel aggregates the surviving samples.

Everything is expressed with :mod:`tubekit.tensor` ops, so one forward pass
gives gradients for the input and every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError, UnsupportedScaleError
from .tensor import Node, Tape

VARIANTS = ("x-only", "y-only", "both")
DEFAULT_STRIDES = (3, 5, 7, 9)


@dataclass(frozen=True)
class DsuConfig:
    channels: int
    hidden: int = 8  # C_m
    base_stride: int = 5  # L_base
    strides: tuple[int, ...] = DEFAULT_STRIDES  # S_odd
    variant: str = "both"
    fixed_stride: int | None = None  # bypass the stride head when set

    def __post_init__(self):
        s = tuple(self.strides)
        if not s or any(v % 2 == 0 for v in s) or list(s) != sorted(set(s)) or s[0] < 3:
            raise ParameterError(f"strides must be odd, strictly increasing and >= 3, got {s}")
        if self.base_stride not in s:
            raise ParameterError(f"base stride {self.base_stride} not in admissible strides {s}")
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fixed_stride is not None and self.fixed_stride not in s:
            raise ParameterError(f"fixed stride {self.fixed_stride} not in admissible strides {s}")
        if self.channels < 1 or self.hidden < 1:
            raise ParameterError("channels and hidden width must be positive")

    @property
    def max_stride(self) -> int:
        return self.strides[-1]

    @property
    def branches(self) -> tuple[str, ...]:
        return {"x-only": ("x",), "y-only": ("y",), "both": ("x", "y")}[self.variant]

    @property
    def offsets_per_subpixel(self) -> int:
        # (dx0, dy0) plus L_max - 1 step offsets
        return 2 + self.max_stride - 1

    @property
    def offset_channels(self) -> int:
        return len(self.branches) * 4 * self.offsets_per_subpixel


@dataclass
class DsuParams:
    """Learnable arrays of one DSU layer, keyed by name."""

    config: DsuConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: DsuConfig, rng: np.random.Generator | None = None, offset_scale: float = 0.0):
        """Bilinear-equivalent start: zero offsets, centre-tap kernels.

        With zero offsets the surviving taps lie on straight lines through the
        subpixel centre; the centre tap is set to ``L / L_max`` (L the starting
        stride) so the stride rescale turns it into a plain bilinear fetch.
        """
        rng = rng or np.random.default_rng(0)
        c, cm, lmax = config.channels, config.hidden, config.max_stride
        a = {
            "W_c": rng.normal(0, 1 / np.sqrt(c), (1, c)),
            "W1": rng.normal(0, 0.5, (cm, 1)),
            # zero output layer: L_dy starts exactly at L_base
            "W2": np.zeros((1, cm)),
            "offset_kernel": rng.normal(0, 1, (config.offset_channels, c, 3, 3)) * offset_scale,
            "offset_bias": np.zeros(config.offset_channels),
        }
        centre = np.zeros((c, lmax))
        start = config.fixed_stride or config.base_stride
        centre[:, lmax // 2] = start / lmax
        for b in config.branches:
            a[f"agg_{b}"] = centre.copy()
        return cls(config, a)

    def leaves(self, tape: Tape) -> dict[str, Node]:
        return {k: tape.leaf(v) for k, v in self.arrays.items()}


@dataclass
class StrideDecision:
    z: np.ndarray  # (N,)
    l_dy: np.ndarray  # (N,)
    l_odd: np.ndarray  # (N,) odd ints as floats
    l_dy_node: Node | None = None
    l_odd_node: Node | None = None

    @property
    def c(self) -> np.ndarray:
        return (self.l_odd.astype(np.int64) - 1) // 2


@dataclass
class SnakePath:
    coords: np.ndarray  # (..., L_max, 2) fractional (x, y)
    valid: np.ndarray  # (..., L_max) bool


INITIAL_OFFSETS = {
    "TL": (-0.25, -0.25),
    "TR": (0.25, -0.25),
    "BL": (-0.25, 0.25),
    "BR": (0.25, 0.25),
}


def initial_offsets(scale: int = 2) -> dict[str, tuple[float, float]]:
    """Subpixel (dx, dy) offsets in parent-pixel units, ordered TL, TR, BL, BR."""
    if scale != 2:
        raise UnsupportedScaleError(f"only scale factor 2 is supported, got {scale}")
    return dict(INITIAL_OFFSETS)


# --- stride selection ---------------------------------------------------------


def compress_to_scalar(x: Node, w_c: Node) -> Node:
    """Per-sample spatial mean of the channel-compressed map, shape (N,)."""
    c = x.shape[1]
    if w_c.shape != (1, c):
        raise DimensionError(f"W_c must be 1 x C = 1 x {c}, got {w_c.shape}")
    k = T.reshape(w_c, (1, c, 1, 1))
    z = T.global_avg_pool(T.conv2d(x, k))
    return T.reshape(z, (x.shape[0],))


def stride_from_scalar(z: Node, w1: Node, w2: Node, cfg: DsuConfig) -> tuple[Node, Node]:
    """Continuous stride L_dy and its STE-rounded odd value L_odd, both (N,)."""
    n = z.shape[0]
    hidden = T.relu(T.linear(T.reshape(z, (n, 1)), w1))
    t = T.tanh(T.linear(hidden, w2))
    l_dy = T.reshape(T.affine(t, 0.5 * cfg.base_stride, cfg.base_stride), (n,))
    return l_dy, T.round_to_odd(l_dy, cfg.strides)


def dynamic_stride(x: Node, params: Mapping[str, Node], cfg: DsuConfig) -> StrideDecision:
    z = compress_to_scalar(x, params["W_c"])
    l_dy, l_odd = stride_from_scalar(z, params["W1"], params["W2"], cfg)
    return StrideDecision(z.value.copy(), l_dy.value.copy(), l_odd.value.copy(), l_dy, l_odd)


# --- paths ------------------------------------------------------------------


def _step_matrix(lmax: int) -> np.ndarray:
    """(L_max - 1) x L_max: column t accumulates steps out to tap t.

    Rows 0..c_max-1 are positive-side steps, the rest negative-side steps;
    tap index t = k + c_max for signed offset k.
    """
    cmax = lmax // 2
    a = np.zeros((2 * cmax, lmax))
    for k in range(1, cmax + 1):
        a[:k, cmax + k] = 1.0
        a[cmax : cmax + k, cmax - k] = 1.0
    return a


def _displacement_matrix(lmax: int, branch: str) -> np.ndarray:
    """Maps (dx0, dy0, steps...) to interleaved (x, y) displacements per tap."""
    steps = _step_matrix(lmax)
    m = np.zeros((2 + lmax - 1, 2 * lmax))
    across = 1 if branch == "x" else 0
    m[0, 0::2] = 1.0
    m[1, 1::2] = 1.0
    m[2:, across::2] = steps
    return m


def _tap_offsets(lmax: int, branch: str) -> np.ndarray:
    k = np.arange(lmax) - lmax // 2
    off = np.zeros((lmax, 2))
    off[:, 0 if branch == "x" else 1] = k
    return off


def stride_mask(l_odd: np.ndarray, lmax: int) -> np.ndarray:
    """(N, L_max) validity of each tap for per-sample strides."""
    k = np.abs(np.arange(lmax) - lmax // 2)
    c = (np.asarray(l_odd, dtype=np.int64) - 1) // 2
    return k[None, :] <= c[:, None]


def _path_points(centres: np.ndarray, offsets: Node, lmax: int, branch: str) -> Node:
    """Centres (..., 2) plus offsets (..., L_max + 1) -> path points (..., L_max, 2)."""
    disp = T.matmul(offsets, _displacement_matrix(lmax, branch))
    disp = T.reshape(disp, offsets.shape[:-1] + (lmax, 2))
    base = np.asarray(centres, float)[..., None, :] + _tap_offsets(lmax, branch)
    return T.add(disp, base)


def _build_paths(centres, center_offsets, steps, c, branch) -> SnakePath:
    centres = np.asarray(centres, dtype=float)
    center_offsets = np.broadcast_to(np.asarray(center_offsets, dtype=float), centres.shape)
    steps = np.asarray(steps, dtype=float)
    if steps.shape[-1] % 2:
        raise DimensionError("steps must hold equal positive- and negative-side halves")
    if np.any(np.abs(steps) >= 1) or np.any(np.abs(center_offsets) >= 1):
        raise ParameterError("offsets must lie strictly inside (-1, 1)")
    lmax = steps.shape[-1] + 1
    lead = np.broadcast_shapes(centres.shape[:-1], steps.shape[:-1])
    tape = Tape()
    offs = np.concatenate(
        [np.broadcast_to(center_offsets, lead + (2,)), np.broadcast_to(steps, lead + (lmax - 1,))], axis=-1
    )
    pts = _path_points(np.broadcast_to(centres, lead + (2,)), tape.constant(offs), lmax, branch)
    valid = np.abs(np.arange(lmax) - lmax // 2) <= int(c)
    return SnakePath(pts.value, np.broadcast_to(valid, lead + (lmax,)).copy())


def build_snake_paths_x(centres, center_offsets, steps, c: int) -> SnakePath:
    """X-type paths: unit steps in x, offsets accumulated in y.

    ``steps`` holds L_max - 1 values on its last axis: the first half are the
    positive-side dy increments (nearest the centre first), the second half
    the negative side. Taps with |k| > c are marked invalid.
    """
    return _build_paths(centres, center_offsets, steps, c, "x")


def build_snake_paths_y(centres, center_offsets, steps, c: int) -> SnakePath:
    """Y-type paths: unit steps in y, offsets accumulated in x."""
    return _build_paths(centres, center_offsets, steps, c, "y")


def subpixel_centres(h: int, w: int) -> np.ndarray:
    """(2H, 2W, 2) parent-grid (x, y) centre of every output pixel."""
    rows = (np.arange(2 * h) // 2) + np.where(np.arange(2 * h) % 2 == 0, -0.25, 0.25)
    cols = (np.arange(2 * w) // 2) + np.where(np.arange(2 * w) % 2 == 0, -0.25, 0.25)
    out = np.empty((2 * h, 2 * w, 2))
    out[..., 0] = cols[None, :]
    out[..., 1] = rows[:, None]
    return out


# --- sampling and aggregation ----------------------------------------------


def sample_and_aggregate(x: Node, coords: Node, kernel: Node, mask: np.ndarray, l_odd) -> Node:
    """Depthwise masked aggregation of path samples.

    ``coords`` is N x P x L_max x 2, ``kernel`` C x L_max, ``mask`` N x L_max
    and ``l_odd`` a length-N Node or array. Returns N x C x P. Masked taps
    contribute nothing; the result is rescaled by L_max / L_odd so a constant
    input under a uniform kernel keeps its value for every stride.
    """
    n, c = x.shape[:2]
    p, lmax = coords.shape[1], coords.shape[2]
    if kernel.shape != (c, lmax):
        raise DimensionError(f"aggregation kernel must be C x L_max = {c} x {lmax}, got {kernel.shape}")
    mask = np.asarray(mask, dtype=bool)
    # taps masked for every sample are never fetched
    active = np.flatnonzero(mask.any(axis=0))
    lo, hi = int(active[0]), int(active[-1]) + 1
    if (lo, hi) != (0, lmax):
        coords = T.slice_axis(coords, 2, lo, hi)
        kernel = T.slice_axis(kernel, 1, lo, hi)
        mask = mask[:, lo:hi]
    taps_n = hi - lo
    samples = T.grid_sample_bilinear(x, T.reshape(coords, (n, p * taps_n, 2)))
    samples = T.reshape(samples, (n, c, p, taps_n))
    taps = T.mul(T.reshape(kernel, (1, c, 1, taps_n)), mask.astype(float).reshape(n, 1, 1, taps_n))
    agg = T.sum(T.mul(samples, taps), axis=-1)
    tape = x.tape
    l_odd = l_odd if isinstance(l_odd, Node) else tape.constant(np.asarray(l_odd, float))
    scale = T.reshape(T.div(float(lmax), l_odd), (n, 1, 1))
    return T.mul(agg, scale)


@dataclass
class DsuTrace:
    """Intermediate values of one forward pass, for inspection and plotting."""

    decision: StrideDecision
    offsets: np.ndarray  # N x offset_channels x H x W after tanh
    coords: dict[str, np.ndarray]  # branch -> N x 2H x 2W x L_max x 2
    mask: np.ndarray  # N x L_max


def dsu_forward(
    x: Node,
    params: Mapping[str, Node],
    cfg: DsuConfig,
    stride_shift: np.ndarray | None = None,
) -> tuple[Node, DsuTrace]:
    """Upsample N x C x H x W to N x C x 2H x 2W.

    ``stride_shift`` replaces the rounding of L_dy with the addition of a
    frozen constant (L_dy + shift). Passing ``L_odd - L_dy`` from a reference
    pass gives the smooth network whose derivative the straight-through
    estimator reports, which is what finite differences can be checked
    against.
    """
    if x.value.ndim != 4:
        raise DimensionError(f"dsu_forward expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise DimensionError(f"input has C={c} channels, layer configured for {cfg.channels}")
    if h < 2 or w < 2:
        raise DimensionError(f"dsu_forward needs H, W >= 2, got {h} x {w}")
    lmax = cfg.max_stride
    tape = x.tape

    if cfg.fixed_stride is not None:
        l_odd_arr = np.full(n, float(cfg.fixed_stride))
        l_eff = tape.constant(l_odd_arr)
        decision = StrideDecision(np.zeros(n), l_odd_arr.copy(), l_odd_arr.copy(), None, l_eff)
    else:
        z = compress_to_scalar(x, params["W_c"])
        l_dy, l_odd = stride_from_scalar(z, params["W1"], params["W2"], cfg)
        l_odd_arr = l_odd.value
        l_eff = l_odd if stride_shift is None else T.add(l_dy, np.asarray(stride_shift, float))
        decision = StrideDecision(z.value.copy(), l_dy.value.copy(), np.asarray(l_odd_arr).copy(), l_dy, l_eff)
    mask = stride_mask(l_odd_arr, lmax)

    offsets = T.tanh(T.conv2d(x, params["offset_kernel"], padding=1, bias=params["offset_bias"]))
    q1 = cfg.offsets_per_subpixel
    centres = subpixel_centres(h, w)
    outs = []
    coords_trace = {}
    for bi, branch in enumerate(cfg.branches):
        off = T.slice_axis(offsets, 1, bi * 4 * q1, (bi + 1) * 4 * q1)
        # (n, sy, sx, q, j, i) -> (n, j, sy, i, sx, q)
        off = T.reshape(off, (n, 2, 2, q1, h, w))
        off = T.transpose(off, (0, 4, 1, 5, 2, 3))
        off = T.reshape(off, (n, 2 * h, 2 * w, q1))
        pts = _path_points(centres, off, lmax, branch)  # n, 2h, 2w, lmax, 2
        coords_trace[branch] = pts.value
        flat = T.reshape(pts, (n, 4 * h * w, lmax, 2))
        y = sample_and_aggregate(x, flat, params[f"agg_{branch}"], mask, l_eff)
        outs.append(T.reshape(y, (n, c, 2 * h, 2 * w)))
    out = outs[0] if len(outs) == 1 else T.affine(T.add(outs[0], outs[1]), 0.5)
    return out, DsuTrace(decision, offsets.value, coords_trace, mask)


def upsample(x: np.ndarray, params: DsuParams) -> np.ndarray:
    """Forward-only convenience wrapper on plain arrays."""
    tape = Tape()
    out, _ = dsu_forward(tape.constant(x), {k: tape.constant(v) for k, v in params.arrays.items()}, params.config)
    return out.value


def bilinear_upsample2x(x: Node) -> Node:
    """Fixed half-pixel bilinear 2x upsampling with border clamping."""
    n, c, h, w = x.shape
    centres = subpixel_centres(h, w).reshape(1, 4 * h * w, 2)
    coords = np.broadcast_to(centres, (n, 4 * h * w, 2)).copy()
    y = T.grid_sample_bilinear(x, coords)
    return T.reshape(y, (n, c, 2 * h, 2 * w))


@dataclass(frozen=True)
class CostReport:
    params: int
    param_breakdown: dict
    macs_per_output_pixel: float
    per_sample_macs: int
    formula: str

    def macs(self, h: int, w: int) -> float:
        """Multiply-adds for an H x W input (output 2H x 2W), per sample."""
        return self.macs_per_output_pixel * (2 * h) * (2 * w)


def count_params_flops(channels: int, cfg: DsuConfig) -> CostReport:
    """Closed-form parameter and multiply-add counts of one DSU layer."""
    c, cm, lmax = channels, cfg.hidden, cfg.max_stride
    v = len(cfg.branches)
    q = cfg.offset_channels
    breakdown = {
        "W_c": c,
        "W1": cm,
        "W2": cm,
        "offset_kernel": q * c * 9,
        "offset_bias": q,
        "aggregation": v * c * lmax,
    }
    if cfg.fixed_stride is not None:
        for k in ("W_c", "W1", "W2"):
            breakdown[k] = 0
    per_input_pixel = q * c * 9 + (0 if cfg.fixed_stride is not None else c)
    per_output_pixel = per_input_pixel / 4 + v * lmax * c * (4 + 1)
    formula = (
        "params = C + 2*C_m + Q*C*9 + Q + V*C*L_max, Q = V*4*(L_max+1); "
        "MACs/output px = (Q*C*9 + C)/4 + V*L_max*C*(4 bilinear + 1 aggregation); "
        "per-sample head MACs = 2*C_m (excluded from per-pixel)"
    )
    return CostReport(
        sum(breakdown.values()),
        breakdown,
        per_output_pixel,
        0 if cfg.fixed_stride is not None else 2 * cm,
        formula,
    )
