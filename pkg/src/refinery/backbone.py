"""Miniature residual feature extractor with four resolution stages.

A two-conv stride-2 stem brings the image to 1/4 scale; stages 1-4 then
emit maps at 1/4, 1/8, 1/16 and 1/32. Units are pre-activation basic
blocks without normalization; a 1x1 projection shortcut appears whenever
the stride or width changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .engine import Tensor
from .errors import ShapeError
from .nn import Module, conv1x1, conv3x3
from .ops import add, relu


@dataclass(frozen=True)
class BackboneSpec:
    in_channels: int = 3
    stem_channels: int = 16
    channels: Tuple[int, ...] = (32, 64, 128, 256)
    units: Tuple[int, ...] = (1, 1, 1, 1)
    strides: Tuple[int, ...] = (1, 2, 2, 2)
    residual_gain: float = 0.25

    def __post_init__(self):
        for name in ("channels", "units", "strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.channels) == len(self.units) == len(self.strides) == 4):
            raise ShapeError("backbone needs exactly 4 stages", dim="stages")
        if self.strides != (1, 2, 2, 2):
            raise ShapeError(f"stage strides must be (1, 2, 2, 2) to halve resolution per stage, "
                             f"got {self.strides}", dim="strides")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ShapeError(f"stage channels must be non-decreasing, got {self.channels}",
                             dim="channels")
        if min(self.units) < 1 or min(self.channels) < 1 or self.stem_channels < 1:
            raise ShapeError("stage widths and unit counts must be positive", dim="channels")

    @property
    def scales(self) -> Tuple[int, ...]:
        return (4, 8, 16, 32)


class ResUnit(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng, dtype=np.float32, gain: float = 1.0):
        super().__init__()
        self.conv1 = self.add_child("conv1", conv3x3(cin, cout, rng, dtype, stride=stride, bias=False))
        self.conv2 = self.add_child("conv2", conv3x3(cout, cout, rng, dtype, bias=False, gain=gain))
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = self.add_child("proj", conv1x1(cin, cout, rng, dtype, stride=stride))

    def __call__(self, x: Tensor) -> Tensor:
        shortcut = x if self.proj is None else self.proj(x)
        return add(shortcut, self.conv2(relu(self.conv1(relu(x)))))


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        s = spec.stem_channels
        self.stem1 = self.add_child("stem.conv1", conv3x3(spec.in_channels, s, rng, dtype, stride=2))
        self.stem2 = self.add_child("stem.conv2", conv3x3(s, s, rng, dtype, stride=2))
        self.blocks = []
        cin = s
        for m, (c, n, st) in enumerate(zip(spec.channels, spec.units, spec.strides), start=1):
            units = []
            for k in range(n):
                units.append(self.add_child(f"block{m}.unit{k + 1}",
                                            ResUnit(cin, c, st if k == 0 else 1, rng, dtype,
                                                    spec.residual_gain)))
                cin = c
            self.blocks.append(units)

    def __call__(self, image: Tensor):
        """Return ``(f1, f2, f3, f4)`` at 1/4, 1/8, 1/16, 1/32 of the input."""
        if image.ndim != 4 or image.shape[1] != self.spec.in_channels:
            raise ShapeError(f"backbone expects (n, {self.spec.in_channels}, h, w), got {image.shape}",
                             dim="channels")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} must be divisible by 32; pad or crop it first",
                             dim="spatial")
        x = self.stem2(relu(self.stem1(image)))
        feats = []
        for units in self.blocks:
            for unit in units:
                x = unit(x)
            feats.append(x)
        return tuple(feats)
