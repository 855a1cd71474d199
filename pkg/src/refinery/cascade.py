"""Backbone + refinement blocks wired into the four network variants."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rntb
from .backbone import Backbone, BackboneSpec
from .blocks import RCU, Fusion, RefineBlock, RefineBlockSpec
from .engine import Tensor
from .errors import CheckpointMismatch, ConfigError, ShapeError
from .nn import Module, conv1x1
from .ops import bilinear_resize, crop, resize_array

VARIANTS = ("single", "two_cascaded", "four_cascaded", "four_cascaded_two_scale")
ALIASES = {
    "single": "single",
    "cascade2": "two_cascaded",
    "cascade4": "four_cascaded",
    "cascade4-2scale": "four_cascaded_two_scale",
}

# block index -> input sources, lowest resolution first
WIRING = {
    "single": [(1, ["f4", "f3", "f2", "f1"])],
    "two_cascaded": [(2, ["f4", "f3"]), (1, ["refine2", "f2", "f1"])],
    "four_cascaded": [
        (4, ["f4"]),
        (3, ["refine4", "f3"]),
        (2, ["refine3", "f2"]),
        (1, ["refine2", "f1"]),
    ],
}
WIRING["four_cascaded_two_scale"] = WIRING["four_cascaded"]


def canonical_variant(name: str) -> str:
    v = ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(ALIASES)} or {VARIANTS}")
    return v


@dataclass(frozen=True)
class CascadeSpec:
    """Whole-network configuration.

    ``refine_channels`` gives the width of refine1..refine4 (full-width
    networks use 256, 256, 256, 512).
    """

    variant: str = "four_cascaded"
    num_classes: int = 4
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    refine_channels: Tuple[int, int, int, int] = (32, 32, 32, 64)
    num_pool_blocks: int = 2
    pool_window: int = 5
    head_rcus: int = 2
    residual_gain: float = 0.25
    scale_factors: Tuple[float, ...] = (1.2, 0.6)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "refine_channels", tuple(int(c) for c in self.refine_channels))
        object.__setattr__(self, "scale_factors", tuple(float(s) for s in self.scale_factors))
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneSpec(**self.backbone))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.refine_channels) != 4 or min(self.refine_channels) < 1:
            raise ConfigError("refine_channels needs 4 positive widths")
        if self.num_pool_blocks < 0 or self.head_rcus < 0:
            raise ConfigError("num_pool_blocks and head_rcus must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.variant == "four_cascaded_two_scale" and (
                len(self.scale_factors) != 2 or min(self.scale_factors) <= 0):
            raise ConfigError("two-scale variant needs two positive scale factors")

    @property
    def num_scales(self) -> int:
        return 2 if self.variant == "four_cascaded_two_scale" else 1

    def block_specs(self) -> List[RefineBlockSpec]:
        bb = self.backbone
        channels = {f"f{m}": (bb.channels[m - 1], bb.scales[m - 1]) for m in range(1, 5)}
        specs = []
        for index, sources in WIRING[self.variant]:
            paths = tuple(channels[s] for s in sources)
            spec = RefineBlockSpec(index, paths, self.refine_channels[index - 1],
                                   num_pool_blocks=self.num_pool_blocks,
                                   pool_window=self.pool_window,
                                   residual_gain=self.residual_gain)
            channels[f"refine{index}"] = (spec.channels, spec.out_scale)
            specs.append(spec)
        return specs

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CascadeSpec":
        d = json.loads(text)
        d["backbone"] = BackboneSpec(**d["backbone"])
        return cls(**d)


def _validate_wiring(variant: str, bb: BackboneSpec, specs: Sequence[RefineBlockSpec]):
    wiring = WIRING[variant]
    if [s.index for s in specs] != [i for i, _ in wiring]:
        raise ShapeError(f"{variant} needs blocks {[i for i, _ in wiring]}, "
                         f"got {[s.index for s in specs]}", dim="blocks")
    avail = {f"f{m}": (bb.channels[m - 1], bb.scales[m - 1]) for m in range(1, 5)}
    for spec, (_, sources) in zip(specs, wiring):
        if len(spec.paths) != len(sources):
            raise ShapeError(f"refine{spec.index} has {len(spec.paths)} paths, wiring feeds "
                             f"{len(sources)}", dim="paths")
        for i, (src, path) in enumerate(zip(sources, spec.paths)):
            if avail[src] != path:
                raise ShapeError(f"edge {src} -> refine{spec.index}.path{i}: source provides "
                                 f"(channels, scale) {avail[src]}, block expects {path}",
                                 dim="wiring")
        avail[f"refine{spec.index}"] = (spec.channels, spec.out_scale)


class ScalePath(Module):
    """One backbone and its refinement cascade, ending at 1/4 scale."""

    def __init__(self, spec: CascadeSpec, blocks: Sequence[RefineBlockSpec], rng, dtype):
        super().__init__()
        self.variant = spec.variant
        self.backbone = self.add_child("backbone", Backbone(spec.backbone, rng, dtype))
        self.blocks: Dict[int, RefineBlock] = {}
        for bs in blocks:
            self.blocks[bs.index] = self.add_child(f"refine{bs.index}", RefineBlock(bs, rng, dtype))
        self.out_channels = blocks[-1].channels

    def __call__(self, image: Tensor) -> Tensor:
        f = self.backbone(image)
        outputs = {f"f{m}": f[m - 1] for m in range(1, 5)}
        for index, sources in WIRING[self.variant]:
            outputs[f"refine{index}"] = self.blocks[index]([outputs[s] for s in sources])
        return outputs[f"refine{WIRING[self.variant][-1][0]}"]


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = image.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not (ph or pw):
        return image
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, mode="reflect" if min(h, w) > 1 else "edge")


class RefineNet(Module):
    """Dense classifier: scores ``(n, K, h, w)`` at input resolution."""

    def __init__(self, spec: CascadeSpec, seed: int = 0,
                 blocks: Optional[Sequence[RefineBlockSpec]] = None):
        super().__init__()
        self.spec = spec
        self.seed = seed
        dtype = np.dtype(spec.dtype)
        self.dtype = dtype
        blocks = list(blocks) if blocks is not None else spec.block_specs()
        _validate_wiring(spec.variant, spec.backbone, blocks)
        self.block_specs = blocks
        rng = np.random.default_rng(seed)
        if spec.num_scales == 1:
            self.paths = [self.add_child("", ScalePath(spec, blocks, rng, dtype))]
            width = self.paths[0].out_channels
            self.fusion = None
        else:
            self.paths = [self.add_child(f"scale{i}", ScalePath(spec, blocks, rng, dtype))
                          for i in range(2)]
            width = self.paths[0].out_channels
            self.fusion = self.add_child("fusion", Fusion([width, width], rng, dtype))
        self.head_rcus = [self.add_child(f"head.rcu{k + 1}", RCU(width, rng, dtype, spec.residual_gain))
                          for k in range(spec.head_rcus)]
        self.classifier = self.add_child("head.classifier",
                                         conv1x1(width, spec.num_classes, rng, dtype))

    def named_parameters(self, prefix: str = ""):
        # the single-scale path is registered under "" so its names start at "backbone"/"refine"
        for name, p in super().named_parameters(prefix):
            yield name.lstrip("."), p

    def _head(self, x: Tensor) -> Tensor:
        for rcu in self.head_rcus:
            x = rcu(x)
        return self.classifier(x)

    def features(self, image) -> Tensor:
        """Fused 1/4-scale feature map before the prediction head."""
        img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=self.dtype)
        if img.ndim != 4:
            raise ShapeError(f"image must be (n, c, h, w), got {img.shape}", dim="rank")
        if self.fusion is None:
            return self.paths[0](Tensor(pad_to_multiple(img)))
        h, w = img.shape[2:]
        feats = []
        for path, factor in zip(self.paths, self.spec.scale_factors):
            sh, sw = max(1, round(h * factor)), max(1, round(w * factor))
            scaled = resize_array(img, sh, sw)
            f = path(Tensor(pad_to_multiple(scaled)))
            fh, fw = -(-sh // 4), -(-sw // 4)
            if f.shape[2:] != (fh, fw):
                f = crop(f, 0, 0, fh, fw)
            feats.append(f)
        return self.fusion(feats)

    def __call__(self, image) -> Tensor:
        img = image.data if isinstance(image, Tensor) else np.asarray(image)
        h, w = img.shape[2:]
        scores = self._head(self.features(img))
        if self.fusion is not None:
            return bilinear_resize(scores, h, w)
        ph, pw = h + (-h % 32), w + (-w % 32)
        scores = bilinear_resize(scores, ph, pw)
        if (ph, pw) != (h, w):
            scores = crop(scores, 0, 0, h, w)
        return scores

    forward = __call__


def build(spec: CascadeSpec, seed: int = 0,
          blocks: Optional[Sequence[RefineBlockSpec]] = None) -> RefineNet:
    return RefineNet(spec, seed, blocks)


_SCALE = re.compile(r"scale\d+$")


def count_params(model: Module) -> Dict[str, int]:
    """Parameter counts grouped by top-level module, plus ``total``."""
    counts: Dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if _SCALE.match(parts[0]) else parts[0]
        counts[key] = counts.get(key, 0) + p.data.size
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------- checkpoints

RESERVED_PREFIXES = ("meta.", "optim.", "train.")


def model_entries(model: RefineNet) -> Dict[str, np.ndarray]:
    entries = {name: p.data for name, p in model.named_parameters()}
    entries["meta.spec"] = np.frombuffer(model.spec.to_json().encode(), dtype=np.uint8)
    entries["meta.seed"] = np.frombuffer(np.int64(model.seed).tobytes(), dtype=np.uint8)
    return entries


def save_checkpoint(path, model: RefineNet, extra: Optional[Dict[str, np.ndarray]] = None):
    entries = model_entries(model)
    if extra:
        entries.update(extra)
    rntb.save_container(path, entries)


def load_parameters(model: Module, entries: Dict[str, np.ndarray]):
    """Copy entries into ``model``; any missing, unexpected or mis-shaped
    parameter name raises :class:`CheckpointMismatch` listing all of them."""
    params = dict(model.named_parameters())
    stored = {k: v for k, v in entries.items() if not k.startswith(RESERVED_PREFIXES)}
    problems = []
    for name in params:
        if name not in stored:
            problems.append(f"missing {name}")
        elif stored[name].shape != params[name].shape:
            problems.append(f"shape {name}: checkpoint {stored[name].shape} vs model {params[name].shape}")
    problems += [f"unexpected {name}" for name in stored if name not in params]
    if problems:
        raise CheckpointMismatch("checkpoint does not match model: " + "; ".join(problems[:10]),
                                 problems)
    for name, p in params.items():
        p.data = stored[name].astype(p.dtype, copy=True)


def _spec_diff(a: dict, b: dict, prefix: str = "") -> List[str]:
    out = []
    for k in a:
        if isinstance(a[k], dict):
            out += _spec_diff(a[k], b[k], f"{prefix}{k}.")
        elif a[k] != b[k]:
            out.append(f"{prefix}{k}: checkpoint {a[k]!r}, requested {b[k]!r}")
    return out


def load_checkpoint(path, spec: Optional[CascadeSpec] = None):
    """Rebuild the model stored at ``path``.

    When ``spec`` is given, the stored spec must equal it. Returns
    ``(model, entries)``.
    """
    entries = rntb.load_container(path)
    if "meta.spec" not in entries:
        raise CheckpointMismatch("checkpoint lacks meta.spec", ["missing meta.spec"])
    stored = CascadeSpec.from_json(entries["meta.spec"].tobytes().decode())
    if spec is not None and stored != spec:
        diffs = _spec_diff(asdict(stored), asdict(spec))
        raise CheckpointMismatch("checkpoint spec differs from requested spec: " + "; ".join(diffs),
                                 [f"meta.spec {d}" for d in diffs])
    seed = int(np.frombuffer(entries["meta.seed"].tobytes(), dtype=np.int64)[0]) \
        if "meta.seed" in entries else 0
    model = RefineNet(stored, seed)
    load_parameters(model, entries)
    return model, entries


class PixelLinear(Module):
    """Per-pixel linear softmax classifier on RGB: the no-context baseline."""

    def __init__(self, num_classes: int, in_channels: int = 3, seed: int = 0, dtype="float32"):
        super().__init__()
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.classifier = self.add_child(
            "classifier", conv1x1(in_channels, num_classes, np.random.default_rng(seed), self.dtype))

    def __call__(self, image) -> Tensor:
        img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=self.dtype)
        return self.classifier(Tensor(img))
