"""Line-oriented ``key = value`` configuration files and run configs."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import FormatError, ParameterError


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_kv(items: dict) -> str:
    return "".join(f"{k} = {_render(v)}\n" for k, v in items.items())


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_render(x) for x in v)
    return str(v)


def _convert(key: str, raw: str, tp):
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        origin = typing.get_origin(tp)
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            return tuple(_convert(key, part.strip(), inner) for part in raw.split(",") if part.strip())
        if origin in (typing.Union, types.UnionType):
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if raw.lower() in ("", "none"):
                return None
            return _convert(key, raw, args[0])
    except ValueError as exc:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r}") from exc
    raise ParameterError(f"config key {key!r}: unsupported type {tp}")


def build(cls, kv: dict[str, str], base=None):
    """Instantiate dataclass ``cls`` from string values; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(kv) - names)
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _convert(k, v, hints[k]) for k, v in kv.items()}
    if base is not None:
        return dataclasses.replace(base, **values)
    return cls(**values)


def as_kv(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


@dataclass(frozen=True)
class RunConfig:
    """Toy training experiment; every field doubles as a ``--flag`` on the CLI."""

    out: str = "runs/toy"
    data: str = ""  # dataset directory from ``tubekit gen``; empty generates on the fly
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    steps: int = 300
    lr: float = 0.01
    lr_min: float = 1e-6
    lr_power: float = 0.9
    warmup: int = 100
    batch_size: int = 4
    upsampler: tuple[str, ...] = ("dsu", "bilinear")
    stride: tuple[str, ...] = ("dynamic",)
    loss: tuple[str, ...] = ("bswl",)
    alpha: float = 10.0
    base_stride: int = 5
    variant: str = "both"
    hidden: int = 8
    channels: int = 8
    size: int = 32
    n_train: int = 256
    n_val: int = 32
    tubes: int = 2
    width_min: int = 1
    width_max: int = 2
    curvature: float = 0.25
    branch_prob: float = 0.3
    noise_sigma: float = 0.5
    checkpoints: bool = True

    def __post_init__(self):
        for u in self.upsampler:
            if u not in ("dsu", "bilinear"):
                raise ParameterError(f"upsampler must be dsu or bilinear, got {u!r}")
        for s in self.stride:
            if s != "dynamic" and s not in ("3", "5", "7", "9"):
                raise ParameterError(f"stride must be dynamic or one of 3,5,7,9, got {s!r}")
        for l in self.loss:
            if l not in ("bswl", "uniform"):
                raise ParameterError(f"loss must be bswl or uniform, got {l!r}")
        if self.size % 4:
            raise ParameterError(f"image size must be a multiple of 4, got {self.size}")
        if self.steps < 1 or self.batch_size < 1 or self.n_train < 1 or self.n_val < 1:
            raise ParameterError("steps, batch_size, n_train and n_val must be positive")
        if self.alpha < 1:
            raise ParameterError(f"alpha must be >= 1, got {self.alpha}")
        if not self.seeds:
            raise ParameterError("at least one seed is required")
