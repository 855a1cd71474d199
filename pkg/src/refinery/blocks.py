"""Residual convolution units, multi-resolution fusion, chained residual
pooling, and their assembly into one refinement block."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .engine import Tensor
from .errors import ShapeError
from .nn import Conv, Module, conv3x3
from .ops import add, bilinear_resize, maxpool2d, relu

FULL_WIDTH_CHANNELS = {4: 512, 1: 256, 2: 256, 3: 256}


def _check_channels(x: Tensor, expected: int, where: str):
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"{where}: input has shape {x.shape}, expected {expected} channels",
                         dim="channels")


class RCU(Module):
    """``x + conv2(relu(conv1(relu(x))))``; both convs 3x3 without bias."""

    def __init__(self, channels: int, rng, dtype=np.float32, gain: float = 1.0):
        super().__init__()
        self.channels = channels
        self.conv1 = self.add_child("conv1", conv3x3(channels, channels, rng, dtype, bias=False))
        self.conv2 = self.add_child("conv2", conv3x3(channels, channels, rng, dtype, bias=False,
                                                     gain=gain))

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "rcu")
        return add(x, self.conv2(relu(self.conv1(relu(x)))))


class Fusion(Module):
    """Adapt every path to the smallest input width, upsample to the largest
    input resolution, sum. A single path passes through untouched."""

    def __init__(self, in_channels: Sequence[int], rng, dtype=np.float32):
        super().__init__()
        if not in_channels:
            raise ShapeError("fusion needs at least one input path", dim="paths")
        self.in_channels = list(in_channels)
        self.out_channels = min(self.in_channels)
        self.adapt: List[Conv] = []
        if len(self.in_channels) > 1:
            for i, c in enumerate(self.in_channels):
                self.adapt.append(self.add_child(f"adapt{i}", conv3x3(c, self.out_channels, rng, dtype)))

    def __call__(self, inputs: Sequence[Tensor]) -> Tensor:
        if not inputs:
            raise ShapeError("fusion received an empty input list", dim="paths")
        if len(inputs) != len(self.in_channels):
            raise ShapeError(f"fusion built for {len(self.in_channels)} inputs, got {len(inputs)}",
                             dim="paths")
        if len(inputs) == 1:
            return inputs[0]
        th = max(x.shape[2] for x in inputs)
        tw = max(x.shape[3] for x in inputs)
        out = None
        for i, (x, conv) in enumerate(zip(inputs, self.adapt)):
            _check_channels(x, self.in_channels[i], f"fusion path {i}")
            y = conv(x)
            if y.shape[2:] != (th, tw):
                y = bilinear_resize(y, th, tw)
            out = y if out is None else add(out, y)
        return out


class CRP(Module):
    """``relu(x)`` plus the outputs of a chain of (max-pool, conv) blocks,
    each block consuming its predecessor's output."""

    def __init__(self, channels: int, num_blocks: int, rng, dtype=np.float32,
                 window=(5, 5), stride=(1, 1), padding=(2, 2), gain: float = 1.0):
        super().__init__()
        self.channels = channels
        self.window, self.stride, self.padding = window, stride, padding
        self.convs = [self.add_child(f"block{i + 1}", conv3x3(channels, channels, rng, dtype, bias=False,
                                                                 gain=gain))
                      for i in range(num_blocks)]

    @property
    def num_blocks(self):
        return len(self.convs)

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "crp")
        y = relu(x)
        acc = y
        for conv in self.convs:
            y = conv(maxpool2d(y, self.window, self.stride, self.padding))
            acc = add(acc, y)
        return acc


@dataclass(frozen=True)
class RefineBlockSpec:
    """One refinement block.

    ``paths`` lists ``(channels, scale)`` per input, where ``scale`` is the
    downsampling factor relative to the image (4, 8, 16 or 32).
    ``num_pool_blocks = 0`` removes chained residual pooling entirely.
    """

    index: int
    paths: Tuple[Tuple[int, int], ...]
    channels: int
    num_pool_blocks: int = 2
    num_input_rcus: int = 2
    num_output_rcus: int = 1
    pool_window: int = 5
    residual_gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple((int(c), int(s)) for c, s in self.paths))
        if not self.paths:
            raise ShapeError(f"refine{self.index}: at least one input path required", dim="paths")
        if self.channels < 1 or any(c < 1 or s < 1 for c, s in self.paths):
            raise ShapeError(f"refine{self.index}: channel counts and scales must be positive",
                             dim="channels")
        if self.pool_window < 1 or self.pool_window % 2 == 0:
            raise ShapeError(f"refine{self.index}: pool window must be odd", dim="pool_window")

    @property
    def out_scale(self) -> int:
        return min(s for _, s in self.paths)

    @classmethod
    def full_width(cls, index: int, paths, **kw) -> "RefineBlockSpec":
        return cls(index, tuple(paths), FULL_WIDTH_CHANNELS[index], **kw)


class RefineBlock(Module):
    """Per-path adaptation conv and RCUs, fusion, chained pooling, output RCUs."""

    def __init__(self, spec: RefineBlockSpec, rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.adapt: List[Conv] = []
        self.path_rcus: List[List[RCU]] = []
        for i, (cin, _) in enumerate(spec.paths):
            self.adapt.append(self.add_child(f"path{i}.adapt", conv3x3(cin, c, rng, dtype)))
            self.path_rcus.append([
                self.add_child(f"path{i}.rcu{k + 1}", RCU(c, rng, dtype, spec.residual_gain))
                for k in range(spec.num_input_rcus)])
        self.fusion = self.add_child("fusion", Fusion([c] * len(spec.paths), rng, dtype))
        self.crp = None
        if spec.num_pool_blocks > 0:
            p = spec.pool_window // 2
            self.crp = self.add_child("crp", CRP(c, spec.num_pool_blocks, rng, dtype,
                                                 (spec.pool_window,) * 2, (1, 1), (p, p),
                                                 spec.residual_gain))
        self.out_rcus = [self.add_child(f"out.rcu{k + 1}", RCU(c, rng, dtype, spec.residual_gain))
                         for k in range(spec.num_output_rcus)]

    def __call__(self, inputs: Sequence[Tensor]) -> Tensor:
        spec = self.spec
        try:
            if len(inputs) != len(spec.paths):
                raise ShapeError(f"expected {len(spec.paths)} inputs, got {len(inputs)}",
                                 dim="paths")
            paths = []
            for i, x in enumerate(inputs):
                _check_channels(x, spec.paths[i][0], f"path {i}")
                y = self.adapt[i](x)
                for rcu in self.path_rcus[i]:
                    y = rcu(y)
                paths.append(y)
            y = self.fusion(paths)
            if self.crp is not None:
                y = self.crp(y)
            for rcu in self.out_rcus:
                y = rcu(y)
            return y
        except ShapeError as exc:
            raise ShapeError(f"refine{spec.index}: {exc}", dim=exc.dim) from exc
