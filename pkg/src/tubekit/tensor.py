"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation as a node holding its value, the ids
of its inputs and whatever constants the backward rule needs. Backward rules
live in the module-level ``BACKWARD`` registry keyed by op name, so a node
never captures a closure. Nodes are appended in creation order, which is a
topological order; :meth:`Tape.backward` replays them in reverse.

Only the operations the upsampler, the weighted loss and the toy model need
are provided. Broadcasting is supported for the elementwise binary ops.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import DimensionError, NumericError

BACKWARD: dict[str, Callable] = {}


def register(op: str):
    def deco(fn):
        BACKWARD[op] = fn
        return fn

    return deco


def as_tensor(value) -> np.ndarray:
    """Coerce to a float64 array and enforce the tensor invariants."""
    arr = np.asarray(value, dtype=np.float64)
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"tensor shape {arr.shape} has an empty axis")
    return arr


class Node:
    __slots__ = ("tape", "id", "value", "op", "inputs", "saved", "requires_grad", "_grad")

    def __init__(self, tape, nid, value, op, inputs, saved, requires_grad):
        self.tape = tape
        self.id = nid
        self.value = value
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.requires_grad = requires_grad
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        # discrete branch states (relu signs, bilinear cells, chosen strides);
        # gradcheck uses these to reject stencils that straddle a kink
        self.regime: list[bytes] = []

    def _record(self, value, op=None, inputs=(), saved=None, requires_grad=None) -> Node:
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        node = Node(self, len(self.nodes), value, op, tuple(inputs), saved or {}, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        return self._record(as_tensor(value).copy(), requires_grad=True)

    def constant(self, value) -> Node:
        return self._record(np.asarray(value, dtype=np.float64), requires_grad=False)

    def release(self) -> None:
        """Drop every recorded node. Nodes point back at their tape, so a
        finished tape otherwise waits for the cycle collector, large arrays included."""
        self.nodes.clear()
        self.regime.clear()

    def signature(self) -> str:
        h = hashlib.sha1()
        for item in self.regime:
            h.update(item)
        return h.hexdigest()

    def backward(self, out: Node, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if out.value.size != 1:
                raise DimensionError(f"backward from non-scalar output of shape {out.shape} needs a seed")
            seed = np.ones_like(out.value)
        out._grad = np.asarray(seed, dtype=np.float64).reshape(out.shape)
        for node in reversed(self.nodes[: out.id + 1]):
            if node.op is None or node._grad is None or not node.requires_grad:
                continue
            values = [self.nodes[i].value for i in node.inputs]
            grads = BACKWARD[node.op](node, node._grad, *values)
            for i, g in zip(node.inputs, grads):
                inp = self.nodes[i]
                if g is None or not inp.requires_grad:
                    continue
                inp._grad = g if inp._grad is None else inp._grad + g


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a tape Node")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise binary ----------------------------------------------------


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return t._record(a.value + b.value, "add", (a.id, b.id))


@register("add")
def _add_bw(node, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return t._record(a.value - b.value, "sub", (a.id, b.id))


@register("sub")
def _sub_bw(node, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return t._record(a.value * b.value, "mul", (a.id, b.id))


@register("mul")
def _mul_bw(node, g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return t._record(a.value / b.value, "div", (a.id, b.id))


@register("div")
def _div_bw(node, g, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def affine(x: Node, scale: float, shift: float = 0.0) -> Node:
    """``scale * x + shift`` with constant scalars."""
    return x.tape._record(scale * x.value + shift, "affine", (x.id,), {"scale": scale})


@register("affine")
def _affine_bw(node, g, x):
    return (node.saved["scale"] * g,)


# --- reductions and shape ---------------------------------------------------


def sum(x: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    return x.tape._record(
        np.sum(x.value, axis=axis, keepdims=keepdims), "sum", (x.id,), {"axis": axis, "keepdims": keepdims}
    )


@register("sum")
def _sum_bw(node, g, x):
    axis = node.saved["axis"]
    if axis is not None and not node.saved["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    s = sum(x, axis=axis, keepdims=keepdims)
    count = x.value.size // max(s.value.size, 1)
    return affine(s, 1.0 / count)


def reshape(x: Node, shape) -> Node:
    return x.tape._record(x.value.reshape(shape), "reshape", (x.id,))


@register("reshape")
def _reshape_bw(node, g, x):
    return (g.reshape(x.shape),)


def transpose(x: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    return x.tape._record(np.transpose(x.value, axes), "transpose", (x.id,), {"axes": axes})


@register("transpose")
def _transpose_bw(node, g, x):
    return (np.transpose(g, np.argsort(node.saved["axes"])),)


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    idx = [slice(None)] * x.value.ndim
    idx[axis] = slice(start, stop)
    return x.tape._record(x.value[tuple(idx)], "slice", (x.id,), {"index": tuple(idx)})


@register("slice")
def _slice_bw(node, g, x):
    out = np.zeros_like(x)
    out[node.saved["index"]] = g
    return (out,)


def concat(xs: Sequence[Node], axis: int) -> Node:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    return t._record(
        np.concatenate([x.value for x in xs], axis=axis), "concat", [x.id for x in xs], {"axis": axis, "sizes": sizes}
    )


@register("concat")
def _concat_bw(node, g, *xs):
    splits = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=node.saved["axis"]))


# --- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Node:
    """``a @ b`` where ``b`` is 2-D and ``a`` has the contracted axis last."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if b.value.ndim != 2 or a.value.shape[-1] != b.value.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return t._record(a.value @ b.value, "matmul", (a.id, b.id))


@register("matmul")
def _matmul_bw(node, g, a, b):
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def linear(x, weights, bias=None) -> Node:
    """Affine map ``x @ weights.T + bias`` with ``weights`` shaped (out, in)."""
    t = _tape_of(x, weights, bias)
    x, w = _lift(t, x), _lift(t, weights)
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[1]:
        raise DimensionError(f"linear: input feature axis {x.shape[-1]} does not match weights {w.shape}")
    out = x.value @ w.value.T
    inputs = [x.id, w.id]
    if bias is not None:
        b = _lift(t, bias)
        if b.value.shape != (w.value.shape[0],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match output width {w.shape[0]}")
        out = out + b.value
        inputs.append(b.id)
    return t._record(out, "linear", inputs)


@register("linear")
def _linear_bw(node, g, x, w, b=None):
    g2 = g.reshape(-1, w.shape[0])
    x2 = x.reshape(-1, w.shape[1])
    grads = [(g2 @ w).reshape(x.shape), g2.T @ x2]
    if b is not None:
        grads.append(g2.sum(axis=0))
    return tuple(grads)


# --- elementwise nonlinearities ---------------------------------------------


def relu(x: Node) -> Node:
    active = x.value > 0
    x.tape.regime.append(np.packbits(active).tobytes())
    return x.tape._record(np.where(active, x.value, 0.0), "relu", (x.id,))


@register("relu")
def _relu_bw(node, g, x):
    # sub-gradient 0 at exactly 0
    return (np.where(x > 0, g, 0.0),)


def tanh(x: Node) -> Node:
    return x.tape._record(np.tanh(x.value), "tanh", (x.id,))


@register("tanh")
def _tanh_bw(node, g, x):
    y = node.value
    return (g * (1.0 - y * y),)


def sigmoid(x: Node) -> Node:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return x.tape._record(out, "sigmoid", (x.id,))


@register("sigmoid")
def _sigmoid_bw(node, g, x):
    y = node.value
    return (g * y * (1.0 - y),)


def round_to_odd(x: Node, choices: Sequence[int]) -> Node:
    """Snap each value to the nearest admissible stride, ties to the smaller.

    The backward pass is the straight-through identity: the upstream gradient
    is handed to ``x`` unchanged.
    """
    ch = np.asarray(sorted(choices), dtype=np.float64)
    dist = np.abs(x.value[..., None] - ch)
    # argmin returns the first minimum, i.e. the smaller member on ties
    out = ch[np.argmin(dist, axis=-1)]
    x.tape.regime.append(out.tobytes())
    return x.tape._record(out, "round_to_odd", (x.id,))


@register("round_to_odd")
def _round_to_odd_bw(node, g, x):
    return (g,)


# --- image ops --------------------------------------------------------------


def global_avg_pool(x: Node) -> Node:
    if x.value.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got shape {x.shape}")
    return x.tape._record(x.value.mean(axis=(2, 3), keepdims=True), "gap", (x.id,))


@register("gap")
def _gap_bw(node, g, x):
    hw = x.shape[2] * x.shape[3]
    return (np.broadcast_to(g / hw, x.shape).copy(),)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None) -> Node:
    """Cross-correlation of an NCHW input with an OIKK kernel."""
    t = _tape_of(x, kernel, bias)
    x, k = _lift(t, x), _lift(t, kernel)
    if x.value.ndim != 4 or k.value.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
    n, c, h, w = x.value.shape
    o, i, kh, kw = k.value.shape
    if i != c:
        raise DimensionError(f"conv2d: kernel input-channel axis I={i} does not match input channel axis C={c}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: output spatial axes H,W would be {ho}x{wo} for input {h}x{w}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    out = np.tensordot(win, k.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = [x.id, k.id]
    if bias is not None:
        b = _lift(t, bias)
        if b.value.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {b.shape} does not match output channels O={o}")
        out = out + b.value[None, :, None, None]
        inputs.append(b.id)
    return t._record(np.ascontiguousarray(out), "conv2d", inputs, {"stride": stride, "padding": padding})


@register("conv2d")
def _conv2d_bw(node, g, x, k, b=None):
    s, p = node.saved["stride"], node.saved["padding"]
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _windows(xp, kh, kw, s)[:, :, :ho, :wo]
    gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib
    gx = gxp[:, :, p : p + h, p : p + w]
    grads = [gx, gk]
    if b is not None:
        grads.append(g.sum(axis=(0, 2, 3)))
    return tuple(grads)


def _bilinear_setup(shape, coords):
    n, c, h, w = shape
    x = coords[..., 0]
    y = coords[..., 1]
    xin = (x >= 0) & (x <= w - 1)
    yin = (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    return x0, x1, y0, y1, fx, fy, xin, yin


def grid_sample_bilinear(x, coords) -> Node:
    """Bilinear fetch of an NCHW input at fractional pixel coordinates.

    ``coords`` is N x P x 2 holding (x, y) in pixel units, where pixel centres
    sit on integers. Points outside ``[0, W-1] x [0, H-1]`` are clamped onto
    that box and receive zero coordinate gradient. Returns N x C x P.
    """
    t = _tape_of(x, coords)
    x, q = _lift(t, x), _lift(t, coords)
    if x.value.ndim != 4 or q.value.ndim != 3 or q.value.shape[-1] != 2 or q.value.shape[0] != x.value.shape[0]:
        raise DimensionError(f"grid_sample_bilinear: input {x.shape} with coords {q.shape}")
    if np.isnan(q.value).any():
        raise NumericError("grid_sample_bilinear: NaN sample coordinate")
    n, c, h, w = x.value.shape
    x0, x1, y0, y1, fx, fy, xin, yin = _bilinear_setup(x.value.shape, q.value)
    t.regime.append(x0.tobytes() + y0.tobytes() + np.packbits(xin & yin).tobytes())
    rows = x.value.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    m = n * q.value.shape[1]
    base = (np.arange(n, dtype=np.int64) * (h * w))[:, None]
    cols = np.stack([base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1], axis=-1)
    indptr = np.arange(0, 4 * m + 1, 4)

    def csr(vals):
        return sparse.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(m, n * h * w))

    gx, gy = 1 - fx, 1 - fy
    interp = csr(np.stack([gy * gx, gy * fx, fy * gx, fy * fx], axis=-1))
    out = (interp @ rows).reshape(n, -1, c)
    # d/dx and d/dy of the four corner weights, applied lazily in backward
    saved = {
        "interp": interp,
        "ddx": csr(np.stack([-gy, gy, -fy, fy], axis=-1)),
        "ddy": csr(np.stack([-gx, -fx, gx, fx], axis=-1)),
        "rows": rows,
        "inside": (xin, yin),
    }
    return t._record(np.ascontiguousarray(out.transpose(0, 2, 1)), "grid_sample", (x.id, q.id), saved)


@register("grid_sample")
def _grid_sample_bw(node, g, xv, qv):
    n, c, h, w = xv.shape
    p = qv.shape[1]
    s = node.saved
    gt = g.transpose(0, 2, 1).reshape(n * p, c)
    gx_in = gq = None
    tape = node.tape
    if tape.nodes[node.inputs[0]].requires_grad:
        flat = s["interp"].T @ gt
        gx_in = np.ascontiguousarray(flat.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    if tape.nodes[node.inputs[1]].requires_grad:
        xin, yin = s["inside"]
        gq = np.empty((n, p, 2))
        for axis, key, inside in ((0, "ddx", xin), (1, "ddy", yin)):
            slope = s[key] @ s["rows"]
            gq[..., axis] = np.where(inside, np.einsum("mc,mc->m", gt, slope).reshape(n, p), 0.0)
    return gx_in, gq


# --- finite-difference checking ----------------------------------------------


def _evaluate(fn, arrays) -> tuple[float, str]:
    tape = Tape()
    nodes = [tape.constant(a) for a in arrays]
    out = fn(*nodes)
    val = float(np.asarray(out.value).reshape(-1)[0]) if out.value.size == 1 else None
    if val is None:
        raise DimensionError(f"gradcheck function must be scalar-valued, got shape {out.shape}")
    if not math.isfinite(val):
        raise NumericError(f"gradcheck: function value is not finite ({val})")
    return val, tape.signature()


def gradcheck(
    fn: Callable[..., Node],
    params: Sequence,
    probes: int = 8,
    h: float = 1e-4,
    seed: int = 0,
    max_redraws: int = 50,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` receives one Node per entry of ``params`` and must return a scalar
    Node. For each parameter tensor ``probes`` random coordinates are checked;
    a probe whose +h/-h stencil changes any recorded branch state (relu sign,
    bilinear cell, clamp, chosen stride) sits on a kink and is redrawn.
    Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    arrays = [as_tensor(p).copy() for p in params]
    tape = Tape()
    nodes = [tape.leaf(a) for a in arrays]
    out = fn(*nodes)
    if out.value.size != 1:
        raise DimensionError(f"gradcheck function must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.value).all():
        raise NumericError("gradcheck: function value is not finite")
    tape.backward(out)
    analytic = [nd.grad for nd in nodes]
    base_sig = tape.signature()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pi, arr in enumerate(arrays):
        for _ in range(probes):
            for _attempt in range(max_redraws):
                idx = tuple(int(rng.integers(0, d)) for d in arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                fp, sp = _evaluate(fn, arrays)
                arr[idx] = orig - h
                fm, sm = _evaluate(fn, arrays)
                arr[idx] = orig
                if sp == base_sig and sm == base_sig:
                    break
            else:
                raise NumericError(f"gradcheck: no kink-free probe found for parameter {pi}")
            num = (fp - fm) / (2 * h)
            a = float(analytic[pi][idx])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
