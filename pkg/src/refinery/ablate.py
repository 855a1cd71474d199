"""Cascade-depth x chained-pooling ablation at toy scale."""

from __future__ import annotations

import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cascade import CascadeSpec, build
from .data import SegSample
from .evaluate import DEFAULT_SCALES, evaluate, report
from .train import TrainConfig, train

ABLATION_VARIANTS = ("single", "two_cascaded", "four_cascaded")
ROW_LABELS = {
    "single": "single RefineNet",
    "two_cascaded": "2-cascaded RefineNet",
    "four_cascaded": "4-cascaded RefineNet",
}


@dataclass(frozen=True)
class Cell:
    variant: str
    crp: bool
    seed: int


@dataclass(frozen=True)
class CellResult:
    cell: Cell
    mean_iou: float
    msc_mean_iou: float
    final_loss: float


def run_cell(cell: Cell, spec: CascadeSpec, cfg: TrainConfig, train_set: Sequence[SegSample],
             val_set: Sequence[SegSample], scales: Sequence[float] = DEFAULT_SCALES) -> CellResult:
    """Train one (variant, CRP, seed) model and score it single- and multi-scale."""
    cell_spec = replace(spec, variant=cell.variant,
                        num_pool_blocks=spec.num_pool_blocks if cell.crp else 0)
    model = build(cell_spec, seed=cell.seed)
    res = train(model, train_set, replace(cfg, seed=cell.seed))
    k = spec.num_classes
    single = report(evaluate(model, val_set, k)).mean_iou
    msc = report(evaluate(model, val_set, k, scales=scales)).mean_iou
    return CellResult(cell, single, msc, res.losses[-1] if res.losses else float("nan"))


def _run_packed(args):
    return run_cell(*args)


def default_workers() -> int:
    cap = os.environ.get("REFINERY_THREADS")
    if cap:
        return max(1, int(cap))
    return max(1, os.cpu_count() or 1)


def run_ablation(spec: CascadeSpec, cfg: TrainConfig, train_set, val_set, seeds: Sequence[int],
                 variants: Sequence[str] = ABLATION_VARIANTS, workers: Optional[int] = None,
                 scales: Sequence[float] = DEFAULT_SCALES) -> List[CellResult]:
    """All cells; each is self-contained, so they may run in separate processes."""
    cells = [Cell(v, crp, s) for v in variants for crp in (True, False) for s in seeds]
    jobs = [(c, spec, cfg, train_set, val_set, scales) for c in cells]
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        return [_run_packed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_packed, jobs))


def summarize(results: Sequence[CellResult]) -> Dict[str, Dict]:
    """Seed-averaged mean IoU per (variant, crp), plus the trend checks."""
    table: Dict[str, Dict[bool, float]] = {}
    for v in dict.fromkeys(r.cell.variant for r in results):
        table[v] = {}
        for crp in (True, False):
            vals = [r.mean_iou for r in results if r.cell.variant == v and r.cell.crp == crp]
            if vals:
                table[v][crp] = float(np.mean(vals))
    crp_on = [r.mean_iou for r in results if r.cell.crp]
    crp_off = [r.mean_iou for r in results if not r.cell.crp]
    return {
        "table": table,
        "crp_on": float(np.mean(crp_on)) if crp_on else float("nan"),
        "crp_off": float(np.mean(crp_off)) if crp_off else float("nan"),
        "single_scale": float(np.mean([r.mean_iou for r in results])),
        "multi_scale": float(np.mean([r.msc_mean_iou for r in results])),
    }


def to_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    buf.write("variant,crp,seed,mean_iou,msc_mean_iou,final_loss\n")
    for r in results:
        c = r.cell
        buf.write(f"{c.variant},{int(c.crp)},{c.seed},{r.mean_iou:.4f},{r.msc_mean_iou:.4f},"
                  f"{r.final_loss:.4f}\n")
    return buf.getvalue()


def to_table(results: Sequence[CellResult]) -> str:
    s = summarize(results)
    lines = [f"{'variant':<24}{'CRP on':>9}{'CRP off':>9}"]
    for v, row in s["table"].items():
        on = f"{row[True]:.4f}" if True in row else "-"
        off = f"{row[False]:.4f}" if False in row else "-"
        lines.append(f"{ROW_LABELS.get(v, v):<24}{on:>9}{off:>9}")
    lines.append(f"{'mean over variants':<24}{s['crp_on']:>9.4f}{s['crp_off']:>9.4f}")
    lines.append(f"single-scale eval {s['single_scale']:.4f}, multi-scale eval {s['multi_scale']:.4f}")
    return "\n".join(lines) + "\n"
