"""Toy scale-2 reconstruction experiment: DSU decoder vs bilinear decoder.

Model: conv3x3 + relu at input resolution, conv3x3/stride 2 + relu, then two
decoder stages (upsample x2, skip-add on the first, conv3x3 + relu) and a
1x1 sigmoid head. Input is the 2x2-pooled noisy image; output is a
foreground probability map at twice the input resolution.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tbf
from . import tensor as T
from .bswl import uniform_map, weight_map, weighted_dice
from .checkpoint import save_checkpoint
from .config import RunConfig, as_kv, format_kv
from .dsu import DsuConfig, DsuParams, bilinear_upsample2x, dsu_forward
from .errors import NumericError
from .imageio import list_masks, read_gray, read_mask
from .metrics import evaluate
from .synth import TubeSpec, generate_mask, pool2, render_and_degrade, sample_specs

log = logging.getLogger(__name__)

UP_STAGES = ("up1", "up2")


class TrainingAborted(NumericError):
    pass


@dataclass(frozen=True)
class Variant:
    upsampler: str  # dsu | bilinear
    stride: str  # dynamic | 3 | 5 | 7 | 9 ; "-" for bilinear
    loss: str  # bswl | uniform

    @property
    def name(self) -> str:
        return f"{self.upsampler}-{self.stride}-{self.loss}"


def learning_rate(step: int, total: int, base: float, floor: float = 1e-6, power: float = 0.9, warmup: int = 100) -> float:
    """Linear warm-up over min(warmup, total // 10) steps, then polynomial decay to ``floor``."""
    w = min(warmup, total // 10)
    if step < w:
        return base * (step + 1) / w
    span = max(total - 1 - w, 1)
    frac = min((step - w) / span, 1.0)
    return (base - floor) * (1.0 - frac) ** power + floor


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def dsu_config(cfg: RunConfig, stride: str) -> DsuConfig:
    fixed = None if stride == "dynamic" else int(stride)
    return DsuConfig(cfg.channels, cfg.hidden, cfg.base_stride, variant=cfg.variant, fixed_stride=fixed)


def init_model(cfg: RunConfig, variant: Variant, seed: int) -> dict[str, np.ndarray]:
    """Shared backbone weights depend only on ``seed``; DSU weights come from a separate stream."""
    c = cfg.channels
    rng = np.random.default_rng([seed, 7])
    p = {
        "e1_w": _he(rng, (c, 1, 3, 3)),
        "e1_b": np.zeros(c),
        "e2_w": _he(rng, (c, c, 3, 3)),
        "e2_b": np.zeros(c),
        "d1_w": _he(rng, (c, c, 3, 3)),
        "d1_b": np.zeros(c),
        "d2_w": _he(rng, (c, c, 3, 3)),
        "d2_b": np.zeros(c),
        "head_w": _he(rng, (1, c, 1, 1)),
        "head_b": np.zeros(1),
    }
    if variant.upsampler == "dsu":
        dcfg = dsu_config(cfg, variant.stride)
        drng = np.random.default_rng([seed, 13])
        for stage in UP_STAGES:
            for k, v in DsuParams.init(dcfg, drng).arrays.items():
                p[f"{stage}.{k}"] = v
    return p


def _upsample(x: T.Node, nodes, stage: str, cfg: RunConfig, variant: Variant, traces: dict):
    if variant.upsampler == "bilinear":
        return bilinear_upsample2x(x)
    prefix = stage + "."
    sub = {k[len(prefix) :]: v for k, v in nodes.items() if k.startswith(prefix)}
    out, trace = dsu_forward(x, sub, dsu_config(cfg, variant.stride))
    traces[stage] = trace
    return out


def forward(nodes: dict[str, T.Node], x: T.Node, cfg: RunConfig, variant: Variant, traces: dict | None = None) -> T.Node:
    """N x 1 x h x w input -> N x 2h x 2w probabilities."""
    traces = {} if traces is None else traces
    a1 = T.relu(T.conv2d(x, nodes["e1_w"], padding=1, bias=nodes["e1_b"]))
    a2 = T.relu(T.conv2d(a1, nodes["e2_w"], stride=2, padding=1, bias=nodes["e2_b"]))
    u1 = _upsample(a2, nodes, "up1", cfg, variant, traces)
    u1 = T.relu(T.conv2d(T.add(u1, a1), nodes["d1_w"], padding=1, bias=nodes["d1_b"]))
    u2 = _upsample(u1, nodes, "up2", cfg, variant, traces)
    u2 = T.relu(T.conv2d(u2, nodes["d2_w"], padding=1, bias=nodes["d2_b"]))
    logits = T.conv2d(u2, nodes["head_w"], bias=nodes["head_b"])
    n, _, h, w = logits.shape
    return T.reshape(T.sigmoid(logits), (n, h, w))


def encode_to_last_stage(params, x: np.ndarray, cfg: RunConfig, variant: Variant) -> np.ndarray:
    """Feature map entering the final upsampling stage (for visualisation)."""
    tape = T.Tape()
    nodes = {k: tape.constant(v) for k, v in params.items()}
    xn = tape.constant(x)
    a1 = T.relu(T.conv2d(xn, nodes["e1_w"], padding=1, bias=nodes["e1_b"]))
    a2 = T.relu(T.conv2d(a1, nodes["e2_w"], stride=2, padding=1, bias=nodes["e2_b"]))
    u1 = _upsample(a2, nodes, "up1", cfg, variant, {})
    u1 = T.relu(T.conv2d(T.add(u1, a1), nodes["d1_w"], padding=1, bias=nodes["d1_b"]))
    tape.release()
    return u1.value


def predict(params, x: np.ndarray, cfg: RunConfig, variant: Variant) -> np.ndarray:
    tape = T.Tape()
    nodes = {k: tape.constant(v) for k, v in params.items()}
    prob = forward(nodes, tape.constant(x), cfg, variant).value
    tape.release()
    return prob


@dataclass
class Split:
    inputs: np.ndarray  # N x 1 x h x w
    masks: np.ndarray  # N x H x W bool
    bswl: np.ndarray  # N x H x W
    uniform: np.ndarray

    def weights(self, loss: str) -> np.ndarray:
        return self.bswl if loss == "bswl" else self.uniform


def _make_split(masks: list[np.ndarray], targets: list[np.ndarray], alpha: float) -> Split:
    inputs = np.stack([pool2(t) for t in targets])[:, None]
    m = np.stack(masks)
    return Split(
        inputs,
        m,
        np.stack([weight_map(k, alpha).weights for k in masks]),
        np.stack([uniform_map(k).weights for k in masks]),
    )


def tube_spec(cfg: RunConfig) -> TubeSpec:
    return TubeSpec(
        cfg.size, cfg.size, cfg.tubes, cfg.width_min, cfg.width_max, cfg.curvature, cfg.branch_prob, cfg.noise_sigma
    )


def synthetic_splits(cfg: RunConfig, seed: int) -> tuple[Split, Split]:
    specs = sample_specs(tube_spec(cfg), cfg.n_train + cfg.n_val, seed)
    masks, targets = [], []
    for s in specs:
        m = generate_mask(s)
        masks.append(m)
        targets.append(render_and_degrade(m, s)[1])
    k = cfg.n_train
    return _make_split(masks[:k], targets[:k], cfg.alpha), _make_split(masks[k:], targets[k:], cfg.alpha)


def directory_splits(cfg: RunConfig, seed: int) -> tuple[Split, Split]:
    """Read ``images/`` + ``masks/``; a seeded permutation picks train and validation."""
    root = Path(cfg.data)
    paths = list_masks(root / "masks")
    masks = [read_mask(p) for p in paths]
    targets = []
    for p in paths:
        img = root / "images" / p.name
        targets.append(read_gray(img) if img.is_file() else masks[len(targets)].astype(float))
    order = np.random.default_rng([seed, 3]).permutation(len(paths))
    n_val = min(cfg.n_val, max(1, len(paths) // 4))
    val, tr = order[:n_val], order[n_val:]
    pick = lambda idx: ([masks[i] for i in idx], [targets[i] for i in idx])  # noqa: E731
    return _make_split(*pick(tr), cfg.alpha), _make_split(*pick(val), cfg.alpha)


@dataclass
class RunResult:
    variant: Variant
    seed: int
    initial_loss: float
    final_train_loss: float
    val_loss: float
    miou: float
    dice: float
    cldice: float
    assd: float
    params: int
    seconds: float
    losses: list
    lrs: list
    strides: list


def validate(params, split: Split, cfg: RunConfig, variant: Variant) -> tuple[float, dict]:
    prob = predict(params, split.inputs, cfg, variant)
    tape = T.Tape()
    vl = weighted_dice(tape.constant(prob), split.masks.astype(float), split.weights(variant.loss), per_sample=True)
    reports = [evaluate(p >= 0.5, g) for p, g in zip(prob, split.masks)]
    assds = [r.assd for r in reports if not math.isnan(r.assd)]
    summary = {
        "miou": float(np.mean([r.miou for r in reports])),
        "dice": float(np.mean([r.dice for r in reports])),
        "cldice": float(np.mean([r.cldice for r in reports])),
        "assd": float(np.mean(assds)) if assds else float("nan"),
    }
    return float(np.mean(vl.value)), summary


def dump_batch(out_dir: Path, tag: str, batch: dict) -> Path:
    d = out_dir / "diagnostic" / tag
    d.mkdir(parents=True, exist_ok=True)
    for k, v in batch.items():
        tbf.save(d / f"{k}.tbf", np.asarray(v, dtype=float))
    return d


def train_run(cfg: RunConfig, variant: Variant, seed: int, train: Split, val: Split, out_dir: Path | None = None) -> tuple[RunResult, dict]:
    t0 = time.perf_counter()
    params = init_model(cfg, variant, seed)
    opt = Adam(params)
    order = np.random.default_rng([seed, 11])
    losses, lrs, strides = [], [], []
    n = train.inputs.shape[0]
    wts = train.weights(variant.loss)
    for step in range(cfg.steps):
        idx = order.choice(n, size=min(cfg.batch_size, n), replace=False)
        tape = T.Tape()
        nodes = {k: tape.leaf(v) for k, v in params.items()}
        traces: dict = {}
        prob = forward(nodes, tape.constant(train.inputs[idx]), cfg, variant, traces)
        loss = T.mean(weighted_dice(prob, train.masks[idx].astype(float), wts[idx], per_sample=True))
        value = float(loss.value)
        if not math.isfinite(value):
            where = dump_batch(out_dir or Path("."), f"{variant.name}-seed{seed}-step{step}", {
                "inputs": train.inputs[idx], "masks": train.masks[idx], "weights": wts[idx], "prob": prob.value,
            })
            raise TrainingAborted(f"{variant.name} seed {seed}: non-finite loss at step {step}; batch dumped to {where}")
        tape.backward(loss)
        lr = learning_rate(step, cfg.steps, cfg.lr, cfg.lr_min, cfg.lr_power, cfg.warmup)
        opt.step({k: nd.grad for k, nd in nodes.items()}, lr)
        losses.append(value)
        lrs.append(lr)
        if "up2" in traces:
            strides.append([float(traces[s].decision.l_odd.mean()) for s in UP_STAGES])
        tape.release()
    val_loss, summary = validate(params, val, cfg, variant)
    result = RunResult(
        variant,
        seed,
        losses[0],
        float(np.mean(losses[-max(1, cfg.steps // 20) :])),
        val_loss,
        summary["miou"],
        summary["dice"],
        summary["cldice"],
        summary["assd"],
        int(sum(v.size for v in params.values())),
        time.perf_counter() - t0,
        losses,
        lrs,
        strides,
    )
    return result, params


def variants(cfg: RunConfig) -> list[Variant]:
    out = []
    for up in cfg.upsampler:
        for stride in cfg.stride if up == "dsu" else ("-",):
            for loss in cfg.loss:
                v = Variant(up, stride, loss)
                if v not in out:
                    out.append(v)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def _median(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return statistics.median(xs) if xs else float("nan")


def comparison_rows(results: list[RunResult]) -> list[dict]:
    rows = []
    for v in dict.fromkeys(r.variant for r in results):
        rs = [r for r in results if r.variant == v]
        rows.append({
            "variant": v.name,
            "upsampler": v.upsampler,
            "stride": v.stride,
            "loss": v.loss,
            "seeds": len(rs),
            "params": rs[0].params,
            "median_val_loss": _median([r.val_loss for r in rs]),
            "median_miou": _median([r.miou for r in rs]),
            "median_dice": _median([r.dice for r in rs]),
            "median_cldice": _median([r.cldice for r in rs]),
            "median_assd": _median([r.assd for r in rs]),
        })
    return rows


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def run_experiment(cfg: RunConfig, out_dir=None) -> list[RunResult]:
    """Train every configured variant for every seed; writes logs and tables when ``out_dir`` is set."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_kv(as_kv(cfg)))
    results = []
    log_rows = []
    for seed in cfg.seeds:
        train, val = directory_splits(cfg, seed) if cfg.data else synthetic_splits(cfg, seed)
        for v in variants(cfg):
            res, params = train_run(cfg, v, seed, train, val, out)
            log.info("%s seed %d: val loss %.4f (%.1fs)", v.name, seed, res.val_loss, res.seconds)
            results.append(res)
            for step, (loss, lr) in enumerate(zip(res.losses, res.lrs)):
                log_rows.append({"variant": v.name, "seed": seed, "step": step, "lr": lr, "loss": loss})
            if out is not None and cfg.checkpoints:
                meta = {
                    "kind": "toy-model",
                    "upsampler": v.upsampler,
                    "stride": v.stride,
                    "loss": v.loss,
                    "seed": seed,
                    "C": cfg.channels,
                    "C_m": cfg.hidden,
                    "L_base": cfg.base_stride,
                    "S_odd": "3,5,7,9",
                    "variant": cfg.variant,
                }
                save_checkpoint(out / "checkpoints" / f"{v.name}-seed{seed}.ckpt", params, meta)
    if out is not None:
        (out / "train_log.csv").write_text(_csv(log_rows))
        result_rows = [{
            "variant": r.variant.name, "seed": r.seed, "initial_loss": r.initial_loss,
            "final_train_loss": r.final_train_loss, "val_loss": r.val_loss, "miou": r.miou,
            "dice": r.dice, "cldice": r.cldice, "assd": r.assd, "params": r.params,
        } for r in results]
        (out / "results.csv").write_text(_csv(result_rows))
        rows = comparison_rows(results)
        (out / "comparison.csv").write_text(_csv(rows))
        summary = {
            "baseline_loss_note": "uniform = weighted Dice with w = 1 (plain soft Dice)",
            "comparison": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows],
        }
        (out / "comparison.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return results
