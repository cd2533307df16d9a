"""Run configuration files (INI syntax) with strict key checking."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Dict, Tuple, Union

from .model import ModelConfig
from .projection import BEV, RV, pooled_extent, view_shape
from .harness.training import TrainConfig
from .voxelizer import VoxelConfig, desk_config


class ConfigError(ValueError):
    """The configuration file is malformed; the message names the offending key."""


@dataclass
class RunConfig:
    voxel: VoxelConfig = field(default_factory=desk_config)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_scenes: int = 200
    n_objects: Tuple[int, int] = (2, 5)
    seed: int = 0
    input: str = ""
    output: str = "out"

    def train_config(self) -> TrainConfig:
        return replace(self.train, mode=self.model.mode, decouple=self.model.decouple, seed=self.seed)


def _floats(n):
    def parse(s):
        vals = tuple(float(v) for v in s.split(","))
        if len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return vals
    return parse


def _ints(n):
    def parse(s):
        vals = tuple(int(v) for v in s.split(","))
        if len(vals) != n:
            raise ValueError(f"expected {n} comma-separated integers")
        return vals
    return parse


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# section -> key -> (owner, attribute, parser)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "voxel": {
        "x_range": ("voxel", "x_range", _floats(2)),
        "y_range": ("voxel", "y_range", _floats(2)),
        "z_range": ("voxel", "z_range", _floats(2)),
        "resolution": ("voxel", "resolution", _floats(3)),
    },
    "model": {
        "channels": ("model", "channels", int),
        "d_f": ("model", "d_f", int),
        "d_q": ("model", "d_q", int),
        "d_v": ("model", "d_v", int),
        "heads": ("model", "heads", int),
        "n_classes": ("model", "n_classes", int),
        "bev_kernel": ("model", "bev_kernel", _ints(2)),
        "rv_kernel": ("model", "rv_kernel", _ints(2)),
        "mode": ("model", "mode", str),
        "decouple": ("model", "decouple", _bool),
    },
    "loss": {
        "lambda_cls": ("train", "lambda_cls", float),
        "lambda_reg": ("train", "lambda_reg", float),
        "lambda_var": ("train", "lambda_var", float),
        "var_target": ("train", "var_target", str),
        "bg_scale": ("train", "bg_scale", float),
    },
    "train": {
        "steps": ("train", "steps", int),
        "batch_size": ("train", "batch_size", int),
        "lr": ("train", "lr", float),
        "betas": ("train", "betas", _floats(2)),
        "weight_decay": ("train", "weight_decay", float),
        "augment": ("train", "augment", _bool),
        "n_scenes": ("run", "n_scenes", int),
        "n_objects": ("run", "n_objects", _ints(2)),
    },
    "run": {
        "seed": ("run", "seed", int),
        "input": ("run", "input", str),
        "output": ("run", "output", str),
    },
}


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    """Parse INI text on top of ``base`` (defaults to the desk configuration)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    base = base or RunConfig()
    updates = {"voxel": {}, "model": {}, "train": {}, "run": {}}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            owner, attr, parse = SCHEMA[section][key]
            try:
                updates[owner][attr] = parse(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key} = {raw!r}: {exc}") from None

    try:
        voxel = replace(base.voxel, **updates["voxel"])
        model = replace(base.model, **updates["model"])
        train = replace(base.train, **updates["train"])
        cfg = replace(base, voxel=voxel, model=model, train=train, **updates["run"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.train.var_target not in ("sem", "geo", "both"):
        raise ConfigError(f"bad value for [loss] var_target = {cfg.train.var_target!r}")
    return cfg


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        bundled = resources.files("vistafuse") / "configs" / p.name
        if bundled.is_file():
            return parse_config(bundled.read_text())
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    """Serialize every key so the result re-parses to an equal configuration."""
    owners = {"voxel": cfg.voxel, "model": cfg.model, "train": cfg.train, "run": cfg}
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (owner, attr, _) in keys.items():
            lines.append(f"{key} = {_fmt(getattr(owners[owner], attr))}")
        lines.append("")
    return "\n".join(lines)


def shape_summary(cfg: RunConfig) -> Dict[str, tuple]:
    """Grid, view and pooled extents implied by ``cfg``; nothing is allocated."""
    grid = cfg.voxel.grid_shape
    bev = view_shape(grid, cfg.model.channels, BEV)
    rv = view_shape(grid, cfg.model.channels, RV)
    bev_p = pooled_extent(bev[1:], cfg.model.bev_kernel)
    rv_p = pooled_extent(rv[1:], cfg.model.rv_kernel)
    return {
        "grid": grid,
        "bev": bev,
        "rv": rv,
        "bev_pooled": bev_p,
        "rv_pooled": rv_p,
        "attention": (bev_p[0] * bev_p[1], rv_p[0] * rv_p[1]),
    }


def bundled_configs() -> Tuple[str, ...]:
    root = resources.files("vistafuse") / "configs"
    return tuple(sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg")))


__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "shape_summary",
    "bundled_configs",
]
