"""Named gradient-check targets grouped by scope (op, block, model)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .backbone import BackboneSpec
from .blocks import CRP, RCU, Fusion, RefineBlock, RefineBlockSpec
from .cascade import CascadeSpec, build
from .engine import Tensor
from .gradcheck import GradCheckReport, grad_check
from .ops import (ConvSpec, add, bilinear_resize, conv2d, crop, maxpool2d, relu, softmax_xent,
                  weighted_sum)

SCOPES = ("op", "block", "model")
TOLERANCE = {"op": 1e-5, "block": 1e-5, "model": 1e-4}
# central-difference step per scope; smaller steps are dominated by roundoff
EPS = {"op": 1e-4, "block": 1e-4, "model": 1e-5}


@dataclass
class SuiteResult:
    scope: str
    name: str
    report: GradCheckReport
    seconds: float

    def line(self) -> str:
        return f"{self.scope:<6}{self.name:<28}{self.report}"


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _op_targets(rng) -> List[Tuple[str, Callable, list]]:
    out = []
    for stride, pad, k, bias in [(1, 1, 3, True), (2, 1, 3, False), (1, 0, 1, True), (2, 2, 5, True)]:
        spec = ConvSpec(3, 4, (k, k), (stride, stride), (pad, pad), bias)
        x, w = _t(rng, (2, 3, 7, 6)), _t(rng, spec.weight_shape, 0.5)
        b = _t(rng, (4,)) if bias else None
        params = [x, w] + ([b] if bias else [])
        out.append((f"conv2d k{k} s{stride} p{pad}", lambda x=x, w=w, b=b, s=spec: conv2d(x, w, b, s), params))
    x = _t(rng, (1, 2, 7, 8))
    out.append(("maxpool2d 5x5 s1", lambda x=x: maxpool2d(x), [x]))
    x = _t(rng, (1, 2, 8, 8))
    out.append(("maxpool2d 3x3 s2", lambda x=x: maxpool2d(x, (3, 3), (2, 2), (1, 1)), [x]))
    x = _t(rng, (2, 3, 4, 5))
    out.append(("relu", lambda x=x: relu(x), [x]))
    a, b = _t(rng, (2, 3, 4, 4)), _t(rng, (2, 3, 4, 4))
    out.append(("add", lambda a=a, b=b: add(a, b), [a, b]))
    x = _t(rng, (1, 2, 3, 5))
    out.append(("bilinear up", lambda x=x: bilinear_resize(x, 7, 9), [x]))
    x = _t(rng, (1, 2, 9, 8))
    out.append(("bilinear down", lambda x=x: bilinear_resize(x, 4, 3), [x]))
    x = _t(rng, (1, 2, 6, 7))
    out.append(("crop", lambda x=x: crop(x, 1, 2, 3, 4), [x]))
    x = _t(rng, (2, 3, 4))
    wts = rng.standard_normal((2, 3, 4))
    out.append(("weighted_sum", lambda x=x: weighted_sum(x, wts), [x]))
    s = _t(rng, (2, 4, 5, 5), 2.0)
    target = rng.integers(0, 4, (2, 5, 5))
    target[0, 0, :2] = 255
    out.append(("softmax_xent", lambda s=s: softmax_xent(s, target), [s]))
    return out


def _block_targets(rng) -> List[Tuple[str, Callable, list]]:
    f64 = np.float64
    out = []
    rcu = RCU(3, rng, f64)
    x = _t(rng, (1, 3, 5, 5))
    out.append(("RCU", lambda: rcu(x), [x] + rcu.parameters()))
    fus = Fusion([4, 3], rng, f64)
    a, b = _t(rng, (1, 4, 2, 3)), _t(rng, (1, 3, 4, 6))
    out.append(("multi-resolution fusion", lambda: fus([a, b]), [a, b] + fus.parameters()))
    crp = CRP(3, 2, rng, f64)
    c = _t(rng, (1, 3, 6, 6))
    out.append(("chained residual pooling", lambda: crp(c), [c] + crp.parameters()))
    block = RefineBlock(RefineBlockSpec(1, ((4, 8), (3, 4)), 3), rng, f64)
    p, q = _t(rng, (1, 4, 2, 2)), _t(rng, (1, 3, 4, 4))
    out.append(("refine block", lambda: block([p, q]), [p, q] + block.parameters()))
    return out


def model_spec(variant: str = "four_cascaded") -> CascadeSpec:
    bb = BackboneSpec(stem_channels=3, channels=(3, 4, 4, 5))
    return CascadeSpec(variant=variant, num_classes=3, backbone=bb, refine_channels=(3, 3, 3, 4),
                       dtype="float64", residual_gain=1.0)


def _model_targets(rng) -> List[Tuple[str, Callable, list]]:
    model = build(model_spec(), seed=int(rng.integers(1 << 31)))
    # zero-initialised biases can put a relu exactly on its kink (an all-negative
    # pixel yields an exact zero map downstream), so check at a generic point
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.standard_normal(p.shape) * 0.1
    x = rng.random((1, 3, 32, 32))
    target = rng.integers(0, 3, (1, 32, 32))
    return [("four_cascaded 32x32 f64", lambda: softmax_xent(model(x), target), model.parameters())]


_BUILDERS = {"op": _op_targets, "block": _block_targets, "model": _model_targets}


def run_suite(scopes: Sequence[str] = SCOPES, seed: int = 0, max_coords: int = 40) -> List[SuiteResult]:
    results = []
    for scope in scopes:
        if scope not in _BUILDERS:
            raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
        rng = np.random.default_rng(seed)
        coords = max_coords if scope != "model" else max(2, max_coords // 10)
        for name, fn, params in _BUILDERS[scope](rng):
            t0 = time.perf_counter()
            rep = grad_check(fn, params, eps=EPS[scope], tol=TOLERANCE[scope], max_coords=coords, seed=seed)
            results.append(SuiteResult(scope, name, rep, time.perf_counter() - t0))
    return results


def op_names() -> List[str]:
    return [name for name, _, _ in _op_targets(np.random.default_rng(0))]
