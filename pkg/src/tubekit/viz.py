"""Sampling-point overlays and attention heatmaps for a DSU layer.

A checkpoint is either a single layer (``kind = dsu``) or a trained toy
model (``kind = toy-model``). For the toy model the final upsampling stage is
shown: the image is the low-resolution network input, which shares its
resolution with the feature map entering that stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import tensor as T  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .config import RunConfig  # noqa: E402
from .dsu import DsuConfig, DsuParams, dsu_forward  # noqa: E402
from .errors import FormatError, ParameterError  # noqa: E402
from .imageio import read_gray  # noqa: E402
from .toy import Variant, dsu_config, encode_to_last_stage  # noqa: E402


@dataclass
class SamplingView:
    at: tuple[int, int]  # output-resolution (x, y)
    l_dy: float
    l_odd: int
    points: dict[str, np.ndarray]  # branch -> K x 2 clamped (x, y) of the valid taps
    heat: np.ndarray  # H x W sampling density of the 3 x 3 output neighbourhood


def dsu_meta(cfg: DsuConfig) -> dict:
    return {
        "kind": "dsu",
        "C": cfg.channels,
        "C_m": cfg.hidden,
        "L_base": cfg.base_stride,
        "S_odd": ",".join(str(s) for s in cfg.strides),
        "variant": cfg.variant,
        "stride": "dynamic" if cfg.fixed_stride is None else str(cfg.fixed_stride),
    }


def save_dsu_checkpoint(path, params: DsuParams) -> Path:
    return save_checkpoint(path, params.arrays, dsu_meta(params.config))


def _meta_int(meta: dict, key: str) -> int:
    try:
        return int(meta[key])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint field {key!r} missing or not an integer") from exc


def _layer_from_checkpoint(path, image: np.ndarray):
    """(DsuConfig, arrays, feature map N x C x H x W) for the layer to display."""
    meta, arrays = load_checkpoint(path)
    kind = meta.get("kind")
    stride = meta.get("stride", "dynamic")
    fixed = None if stride == "dynamic" else int(stride)
    strides = tuple(int(s) for s in meta.get("S_odd", "3,5,7,9").split(","))
    c, cm, base = _meta_int(meta, "C"), _meta_int(meta, "C_m"), _meta_int(meta, "L_base")
    variant = meta.get("variant", "both")
    if kind == "dsu":
        cfg = DsuConfig(c, cm, base, strides, variant, fixed)
        feats = np.repeat(image[None, None], c, axis=1)
        return cfg, arrays, feats
    if kind == "toy-model":
        run = RunConfig(channels=c, hidden=cm, base_stride=base, variant=variant, upsampler=("dsu",))
        v = Variant(meta.get("upsampler", "dsu"), stride, meta.get("loss", "bswl"))
        if v.upsampler != "dsu":
            raise ParameterError("checkpoint uses a bilinear decoder; there are no sampling points to show")
        feats = encode_to_last_stage(arrays, image[None, None], run, v)
        sub = {k[len("up2.") :]: a for k, a in arrays.items() if k.startswith("up2.")}
        return dsu_config(run, stride), sub, feats
    raise FormatError(f"unknown checkpoint kind {kind!r}")


def parse_at(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ParameterError(f"--at expects X,Y integers, got {text!r}") from exc
    return x, y


def _splat(heat: np.ndarray, pts: np.ndarray) -> None:
    """Accumulate bilinear weights of each point onto the pixel grid."""
    h, w = heat.shape
    x0 = np.clip(np.floor(pts[:, 0]).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(pts[:, 1]).astype(int), 0, max(h - 2, 0))
    fx, fy = pts[:, 0] - x0, pts[:, 1] - y0
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        np.add.at(heat, (np.minimum(y0 + dy, h - 1), np.minimum(x0 + dx, w - 1)), wt)


def sampling_view(cfg: DsuConfig, arrays: dict, feats: np.ndarray, at: tuple[int, int]) -> SamplingView:
    _, _, h, w = feats.shape
    x, y = at
    if not (0 <= x < 2 * w and 0 <= y < 2 * h):
        raise ParameterError(f"--at {x},{y} lies outside the {2 * w} x {2 * h} output grid")
    tape = T.Tape()
    _, trace = dsu_forward(tape.constant(feats), {k: tape.constant(v) for k, v in arrays.items()}, cfg)
    valid = trace.mask[0]
    limit = np.array([w - 1, h - 1], float)
    heat = np.zeros((h, w))
    points = {}
    for branch, coords in trace.coords.items():
        pts = np.clip(coords[0], 0.0, limit)  # 2H x 2W x L_max x 2
        points[branch] = pts[y, x][valid]
        ys = slice(max(y - 1, 0), y + 2)
        xs = slice(max(x - 1, 0), x + 2)
        _splat(heat, pts[ys, xs][:, :, valid].reshape(-1, 2))
    return SamplingView(at, float(trace.decision.l_dy[0]), int(trace.decision.l_odd[0]), points, heat)


def _plot_points(image: np.ndarray, view: SamplingView, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    colours = {"x": "tab:red", "y": "tab:cyan"}
    for branch, pts in view.points.items():
        ax.plot(pts[:, 0], pts[:, 1], "-o", color=colours[branch], ms=4, lw=1, label=f"{branch}-type path")
    cx = (view.at[0] + 0.5) / 2 - 0.5
    cy = (view.at[1] + 0.5) / 2 - 0.5
    ax.plot([cx], [cy], "*", color="yellow", ms=10, label="subpixel centre")
    ax.set_title(f"output pixel {view.at}, L_odd = {view.l_odd}")
    ax.legend(loc="lower right", fontsize=7)
    ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def _plot_heat(image: np.ndarray, view: SamplingView, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    shown = np.ma.masked_where(view.heat <= 0, view.heat)
    im = ax.imshow(shown, cmap="inferno", alpha=0.75, interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="sampling density")
    ax.set_title(f"3 x 3 neighbourhood of {view.at}")
    ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def render(ckpt, image_path, at: tuple[int, int], out_dir) -> SamplingView:
    """Write sampling_points.png, attention.png and points.json into ``out_dir``."""
    image = read_gray(image_path)
    cfg, arrays, feats = _layer_from_checkpoint(ckpt, image)
    view = sampling_view(cfg, arrays, feats, at)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _plot_points(image, view, out / "sampling_points.png")
    _plot_heat(image, view, out / "attention.png")
    doc = {
        "at": list(view.at),
        "l_dy": view.l_dy,
        "l_odd": view.l_odd,
        "points": {b: p.tolist() for b, p in view.points.items()},
        "heat_total": float(view.heat.sum()),
    }
    (out / "points.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return view
