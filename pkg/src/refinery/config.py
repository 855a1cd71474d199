"""Plain-text run configuration (``key = value`` lines under ``[section]`` headers)."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .backbone import BackboneSpec
from .cascade import CascadeSpec
from .errors import ConfigError
from .evaluate import DEFAULT_SCALES
from .train import TrainConfig

SECTIONS = ("model", "train", "data", "eval")

# value parsers per key; defaults come from the dataclasses
_INT, _FLOAT, _STR = int, float, str


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_MODEL_KEYS = {
    "variant": _STR, "num_classes": _INT, "seed": _INT, "dtype": _STR,
    "refine_channels": _ints, "num_pool_blocks": _INT, "pool_window": _INT, "head_rcus": _INT,
    "residual_gain": _FLOAT, "scale_factors": _floats,
    "stem_channels": _INT, "backbone_channels": _ints, "backbone_units": _ints,
}
_TRAIN_KEYS = {
    "lr": _FLOAT, "momentum": _FLOAT, "weight_decay": _FLOAT, "batch_size": _INT,
    "iterations": _INT, "schedule": _STR, "power": _FLOAT, "seed": _INT,
    "checkpoint_period": _INT, "augment": _bool, "scale_range": _floats, "crop": _ints,
    "hflip_prob": _FLOAT, "audit_grad": _bool, "clip_grad_norm": _FLOAT, "out_dir": _STR,
}
_DATA_KEYS = {"train": _STR, "val": _STR}
_EVAL_KEYS = {"scales": _floats, "batch_size": _INT}
KEYS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS, "eval": _EVAL_KEYS}


@dataclass(frozen=True)
class RunConfig:
    spec: CascadeSpec = field(default_factory=CascadeSpec)
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "run"
    train_data: Optional[str] = None
    val_data: Optional[str] = None
    eval_scales: Tuple[float, ...] = DEFAULT_SCALES
    eval_batch_size: int = 16

    def sections(self) -> Dict[str, Dict[str, object]]:
        s, bb = self.spec, self.spec.backbone
        model = {
            "variant": s.variant, "num_classes": s.num_classes, "seed": self.model_seed,
            "dtype": s.dtype, "refine_channels": s.refine_channels,
            "num_pool_blocks": s.num_pool_blocks, "pool_window": s.pool_window,
            "head_rcus": s.head_rcus, "residual_gain": s.residual_gain,
            "scale_factors": s.scale_factors, "stem_channels": bb.stem_channels,
            "backbone_channels": bb.channels, "backbone_units": bb.units,
        }
        train = {k: v for k, v in asdict(self.train).items()}
        train["out_dir"] = self.out_dir
        data = {"train": self.train_data or "", "val": self.val_data or ""}
        ev = {"scales": self.eval_scales, "batch_size": self.eval_batch_size}
        return {"model": model, "train": train, "data": data, "eval": ev}

    def echo(self) -> str:
        """Every effective value, in the input format, so the run can be repeated."""
        out = []
        for name, values in self.sections().items():
            out.append(f"[{name}]")
            out.extend(f"{k} = {_fmt(v)}".rstrip() for k, v in values.items())
            out.append("")
        return "\n".join(out)


def _parse_values(raw: Dict[str, Dict[str, str]]) -> Dict[str, Dict[str, object]]:
    parsed: Dict[str, Dict[str, object]] = {}
    for section, items in raw.items():
        if section not in KEYS:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        parsed[section] = {}
        for key, text in items.items():
            if key not in KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]; "
                                  f"known keys: {', '.join(sorted(KEYS[section]))}")
            try:
                parsed[section][key] = KEYS[section][key](text)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from exc
    return parsed


def build_config(values: Dict[str, Dict[str, object]]) -> RunConfig:
    m, t = dict(values.get("model", {})), dict(values.get("train", {}))
    d, e = values.get("data", {}), values.get("eval", {})
    bb_args = {}
    for key, target in (("stem_channels", "stem_channels"), ("backbone_channels", "channels"),
                        ("backbone_units", "units")):
        if key in m:
            bb_args[target] = m.pop(key)
    model_seed = m.pop("seed", 0)
    if "residual_gain" in m:
        bb_args["residual_gain"] = m["residual_gain"]
    try:
        spec = CascadeSpec(backbone=BackboneSpec(**bb_args), **m)
        out_dir = t.pop("out_dir", "run")
        train = TrainConfig(**t)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    scales = tuple(e.get("scales", DEFAULT_SCALES))
    if not scales or min(scales) <= 0:
        raise ConfigError("[eval] scales must be positive")
    return RunConfig(spec, model_seed, train, out_dir, d.get("train") or None, d.get("val") or None,
                     scales, int(e.get("batch_size", 16)))


def read_raw(path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def _absolute_data_paths(raw: Dict[str, Dict[str, str]], base: Path):
    for key, value in raw.get("data", {}).items():
        if value.strip():
            raw["data"][key] = str((base / value.strip()).resolve())


def load_config(path=None, overrides: Optional[Dict[str, Dict[str, str]]] = None) -> RunConfig:
    """Parse ``path`` (if any) then apply ``overrides`` (section -> key -> text).

    Data paths in the file are relative to the file; in overrides, to the
    working directory. Both are stored absolute so the echo reruns anywhere.
    """
    raw: Dict[str, Dict[str, str]] = {}
    if path is not None:
        raw = read_raw(path)
        _absolute_data_paths(raw, Path(path).parent)
    extra = {s: dict(items) for s, items in (overrides or {}).items()}
    _absolute_data_paths(extra, Path.cwd())
    for section, items in extra.items():
        raw.setdefault(section, {}).update(items)
    return build_config(_parse_values(raw))
