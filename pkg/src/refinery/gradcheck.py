"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .engine import Tensor, no_grad
from .ops import weighted_sum


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    checked: int
    worst: Optional[tuple] = None  # (param index, flat coordinate)
    failure: Optional[str] = None
    per_param: List[float] = field(default_factory=list)
    refined: int = 0  # coordinates that needed a smaller step (kink near the point)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.failure})" if self.failure else ""
        refined = f" refined={self.refined}" if self.refined else ""
        return (f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} "
                f"coords={self.checked}{refined}{extra}")


def _scalarize(f: Callable[[], Tensor], seed: int) -> Callable[[], Tensor]:
    # project a tensor-valued output onto a fixed random direction
    proj = {}

    def loss():
        out = f()
        if out.data.size == 1 and out.ndim == 0:
            return out
        if "w" not in proj:
            proj["w"] = np.random.default_rng(seed).standard_normal(out.shape)
        return weighted_sum(out, proj["w"])

    return loss


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-5, max_coords: int = 60, seed: int = 0,
               abs_floor: float = 1e-8, refine_steps: int = 2) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` by reference. Parameters
    with more than ``max_coords`` entries are checked on a seeded random
    subset. The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, abs_floor)``.

    A coordinate that fails at ``eps`` is retried with steps ``eps / 10``,
    ``eps / 100``, ... (``refine_steps`` times) and keeps its smallest error:
    a relu or max-pool kink within ``eps`` of the point biases the wide
    difference, while a wrong gradient disagrees at every step size.
    """
    loss_fn = _scalarize(f, seed)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        return GradCheckReport(np.inf, False, tol, 0, failure="non-finite loss at base point")
    loss.backward()
    rng = np.random.default_rng(seed + 1)
    worst, worst_at, checked, per_param, refined = 0.0, None, 0, [], 0
    for pi, p in enumerate(params):
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        local = 0.0
        for k in idx:
            a = float(analytic.reshape(-1)[k])
            err, step = np.inf, eps
            for attempt in range(refine_steps + 1):
                numeric = _central(loss_fn, flat, int(k), step)
                if numeric is None:
                    return GradCheckReport(np.inf, False, tol, checked, (pi, int(k)),
                                           failure=f"non-finite loss perturbing param {pi} coord {k}")
                err = min(err, abs(a - numeric) / max(abs(a), abs(numeric), abs_floor))
                if err <= tol:
                    refined += attempt > 0
                    break
                step /= 10
            checked += 1
            local = max(local, err)
            if err > worst:
                worst, worst_at = err, (pi, int(k))
        per_param.append(local)
    for p in params:
        p.grad = None
    return GradCheckReport(worst, worst <= tol, tol, checked, worst_at, per_param=per_param,
                           refined=refined)


def _central(loss_fn, flat: np.ndarray, k: int, step: float) -> Optional[float]:
    orig = flat[k]
    with no_grad():
        flat[k] = orig + step
        up = float(loss_fn().data)
        flat[k] = orig - step
        down = float(loss_fn().data)
    flat[k] = orig
    if not (np.isfinite(up) and np.isfinite(down)):
        return None
    return (up - down) / (2 * step)
