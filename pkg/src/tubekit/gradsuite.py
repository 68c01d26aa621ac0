"""Finite-difference battery over every differentiable operation.

Each check reduces an operation's output to a scalar through a fixed random
projection and compares tape gradients with central differences. The report
is a pure function of the seed, so two runs with the same seed print the
same text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .bswl import weight_map, weighted_dice
from .dsu import DsuConfig, DsuParams, dsu_forward
from .synth import TubeSpec, generate_mask

THRESHOLD = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float

    def passed(self, threshold: float = THRESHOLD) -> bool:
        return bool(self.error < threshold)


@dataclass
class SuiteReport:
    seed: int
    threshold: float
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed(self.threshold) for r in self.results)

    @property
    def worst(self) -> float:
        return max((r.error for r in self.results), default=0.0)

    def lines(self) -> list[str]:
        out = [f"gradcheck seed={self.seed} threshold={self.threshold:.0e}"]
        for r in self.results:
            out.append(f"{r.name:<26} max_rel_err={r.error:.3e} {'ok' if r.passed(self.threshold) else 'FAIL'}")
        out.append(f"{'overall':<26} max_rel_err={self.worst:.3e} {'PASS' if self.passed else 'FAIL'}")
        return out


def _projected(op: Callable, shape_rng: np.random.Generator):
    """Wrap ``op`` so its output is contracted with a fixed random tensor."""
    cache: dict[tuple, np.ndarray] = {}

    def fn(*nodes):
        out = op(*nodes)
        if out.shape not in cache:
            cache[out.shape] = shape_rng.standard_normal(out.shape)
        return T.sum(T.mul(out, cache[out.shape]))

    return fn


def _away_from_zero(rng, shape, margin=0.2):
    v = rng.uniform(margin, 1.5, shape)
    return v * rng.choice([-1.0, 1.0], shape)


def _dsu_case(rng: np.random.Generator):
    """1 x 4 x 8 x 8 input through the full layer with a frozen stride shift."""
    cfg = DsuConfig(channels=4, hidden=4, base_stride=5)
    params = DsuParams.init(cfg, rng, offset_scale=0.3)
    arrays = dict(params.arrays)
    arrays["W2"] = rng.normal(0.0, 0.5, arrays["W2"].shape)
    arrays["agg_x"] = arrays["agg_x"] + rng.normal(0.0, 0.1, arrays["agg_x"].shape)
    arrays["agg_y"] = arrays["agg_y"] + rng.normal(0.0, 0.1, arrays["agg_y"].shape)
    x = rng.standard_normal((1, 4, 8, 8))
    names = list(arrays)
    tape = T.Tape()
    ref_nodes = {k: tape.constant(v) for k, v in arrays.items()}
    _, trace = dsu_forward(tape.constant(x), ref_nodes, cfg)
    shift = trace.decision.l_odd - trace.decision.l_dy

    def op(xn, *pn):
        out, _ = dsu_forward(xn, dict(zip(names, pn)), cfg, stride_shift=shift)
        return out

    return op, [x] + [arrays[k] for k in names]


def _dice_case(rng: np.random.Generator, per_sample: bool):
    masks = np.stack([generate_mask(TubeSpec(16, 16, tubes=2, seed=int(s))) for s in rng.integers(0, 10**6, 2)])
    w = np.stack([weight_map(m, 10.0).weights for m in masks])
    pred = rng.uniform(0.05, 0.95, masks.shape)

    def op(p):
        return weighted_dice(p, masks.astype(float), w, eps=1e-6, per_sample=per_sample)

    return op, [pred]


def _cases(rng: np.random.Generator):
    n = rng.standard_normal
    yield "add (broadcast)", lambda a, b: T.add(a, b), [n((3, 4)), n((1, 4))]
    yield "sub (broadcast)", lambda a, b: T.sub(a, b), [n((2, 3, 4)), n((3, 1))]
    yield "mul (broadcast)", lambda a, b: T.mul(a, b), [n((3, 4)), n((3, 1))]
    yield "div", lambda a, b: T.div(a, b), [n((3, 4)), _away_from_zero(rng, (3, 4), 0.5)]
    yield "affine", lambda a: T.affine(a, -1.7, 0.3), [n((5,))]
    yield "sum (axis)", lambda a: T.sum(a, axis=1, keepdims=True), [n((2, 3, 4))]
    yield "mean", lambda a: T.mean(a, axis=(0, 2)), [n((2, 3, 4))]
    yield "reshape+transpose", lambda a: T.transpose(T.reshape(a, (4, 6)), (1, 0)), [n((2, 3, 4))]
    yield "slice+concat", lambda a, b: T.concat([T.slice_axis(a, 1, 1, 3), b], axis=1), [n((2, 4)), n((2, 3))]
    yield "matmul", lambda a, b: T.matmul(a, b), [n((2, 3, 4)), n((4, 5))]
    yield "linear", lambda a, w, b: T.linear(a, w, b), [n((3, 4)), n((2, 4)), n((2,))]
    yield "relu", lambda a: T.relu(a), [_away_from_zero(rng, (4, 5))]
    yield "tanh", lambda a: T.tanh(a), [n((4, 5))]
    yield "sigmoid", lambda a: T.sigmoid(a), [3 * n((4, 5))]
    yield "global_avg_pool", lambda a: T.global_avg_pool(a), [n((2, 3, 4, 5))]
    yield "conv2d (pad 1, bias)", lambda a, k, b: T.conv2d(a, k, padding=1, bias=b), [
        n((2, 3, 5, 6)), n((4, 3, 3, 3)), n((4,))]
    yield "conv2d (stride 2)", lambda a, k: T.conv2d(a, k, stride=2, padding=1), [n((1, 2, 6, 7)), n((3, 2, 3, 3))]
    coords = np.stack([rng.uniform(-0.5, 6.5, (2, 9)), rng.uniform(-0.5, 5.5, (2, 9))], axis=-1)
    yield "grid_sample_bilinear", lambda a, q: T.grid_sample_bilinear(a, q), [n((2, 3, 5, 6)), coords]
    op, params = _dsu_case(rng)
    yield "dsu layer (frozen stride)", op, params
    op, params = _dice_case(rng, per_sample=False)
    yield "weighted dice", op, params
    op, params = _dice_case(rng, per_sample=True)
    yield "weighted dice per-sample", op, params


def ste_identity_error(rng: np.random.Generator) -> float:
    """0 when the rounding node passes its upstream gradient through untouched."""
    tape = T.Tape()
    x = tape.leaf(rng.uniform(2.5, 7.5, 6))
    y = T.round_to_odd(x, (3, 5, 7, 9))
    g = rng.standard_normal(6)
    tape.backward(y, seed=g)
    return 0.0 if np.array_equal(x.grad, g) else float("inf")


def run_suite(seed: int = 0, threshold: float = THRESHOLD, h: float = 1e-4, probes: int = 16) -> SuiteReport:
    rng = np.random.default_rng(seed)
    report = SuiteReport(seed, threshold)
    for name, op, params in _cases(rng):
        fn = _projected(op, np.random.default_rng([seed, len(report.results)]))
        err = T.gradcheck(fn, params, probes=probes, h=h, seed=seed + len(report.results))
        report.results.append(CheckResult(name, err))
    report.results.append(CheckResult("round_to_odd (STE)", ste_identity_error(rng)))
    return report
