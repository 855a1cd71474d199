"""Parameter containers: a tiny module tree with stable dotted names."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .engine import Tensor
from .ops import ConvSpec, conv2d


class Module:
    """Holds named parameters and named child modules.

    Registration order is preserved, so ``named_parameters`` is stable and
    the seeded initialization is reproducible.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def children(self):
        return dict(self._children)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}


def he_normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv(Module):
    """Convolution layer: He-normal weights, zero bias."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32,
                 gain: float = 1.0):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        self.init_std = gain * float(np.sqrt(2.0 / fan_in))
        w = he_normal(rng, spec.weight_shape, np.float64) * gain
        self.weight = self.add_param("weight", Tensor(w.astype(dtype)))
        self.bias: Optional[Tensor] = None
        if spec.has_bias:
            self.bias = self.add_param("bias", Tensor(np.zeros(spec.out_channels, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


def conv3x3(cin: int, cout: int, rng, dtype, stride: int = 1, bias: bool = True,
            gain: float = 1.0) -> Conv:
    return Conv(ConvSpec(cin, cout, (3, 3), (stride, stride), (1, 1), bias), rng, dtype, gain)


def conv1x1(cin: int, cout: int, rng, dtype, stride: int = 1, bias: bool = True) -> Conv:
    return Conv(ConvSpec(cin, cout, (1, 1), (stride, stride), (0, 0), bias), rng, dtype)
