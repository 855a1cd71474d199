"""SGD-momentum training with deterministic data order, checkpoints and
bit-exact resume."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import rntb
from .cascade import RefineNet, count_params, load_checkpoint, model_entries
from .data import AugmentSpec, SegSample, augment, collate
from .errors import CheckpointMismatch, ConfigError, TrainingDiverged
from .nn import Module
from .ops import softmax_xent
from .rng import SplitMix64

log = logging.getLogger(__name__)

_ORDER_KEY = 0x5EED0
_AUG_KEY = 0xA06


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    iterations: int = 1000
    schedule: str = "poly"
    power: float = 0.9
    seed: int = 0
    checkpoint_period: int = 0
    augment: bool = True
    scale_range: tuple = (0.7, 1.3)
    crop: tuple = (64, 64)
    hflip_prob: float = 0.5
    audit_grad: bool = False
    clip_grad_norm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "crop", tuple(int(v) for v in self.crop))
        checks = [
            (self.lr >= 0, "lr must be >= 0"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.schedule in ("constant", "poly"), "schedule must be constant or poly"),
            (self.power > 0, "power must be > 0"),
            (self.checkpoint_period >= 0, "checkpoint_period must be >= 0"),
            (self.clip_grad_norm >= 0, "clip_grad_norm must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.augment_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(self.scale_range, self.crop, self.hflip_prob)

    def lr_at(self, it: int) -> float:
        if self.schedule == "constant" or self.iterations == 0:
            return self.lr
        return self.lr * (1.0 - it / self.iterations) ** self.power


class SGD:
    """``v <- momentum * v + g + weight_decay * w``; ``w <- w - lr * v``."""

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float):
        mu, wd = self.momentum, self.weight_decay
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.buffers[k]
            v = mu * v + g + wd * p.data
            self.buffers[k] = v.astype(p.dtype, copy=False)
            p.data = p.data - p.dtype.type(lr) * self.buffers[k]

    def state_entries(self) -> Dict[str, np.ndarray]:
        return {f"optim.momentum.{k}": v for k, v in self.buffers.items()}

    def load_entries(self, entries: Dict[str, np.ndarray]):
        problems = []
        for k, buf in self.buffers.items():
            key = f"optim.momentum.{k}"
            if key not in entries:
                problems.append(f"missing {key}")
            elif entries[key].shape != buf.shape:
                problems.append(f"shape {key}: {entries[key].shape} vs {buf.shape}")
        known = {f"optim.momentum.{k}" for k in self.buffers}
        problems += [f"unexpected {k}" for k in entries
                     if k.startswith("optim.momentum.") and k not in known]
        if problems:
            raise CheckpointMismatch("optimizer state does not match model: " + "; ".join(problems[:10]),
                                     problems)
        for k, p in self.params.items():
            self.buffers[k] = entries[f"optim.momentum.{k}"].astype(p.dtype, copy=True)


def batch_indices(seed: int, it: int, batch_size: int, n: int, _cache={}) -> List[int]:
    """Indices for iteration ``it``: consecutive slices of per-epoch seeded
    permutations, so the order is a pure function of ``(seed, it)``."""
    out = []
    for k in range(it * batch_size, (it + 1) * batch_size):
        epoch, pos = divmod(k, n)
        key = (seed, epoch, n)
        if key not in _cache:
            if len(_cache) > 64:
                _cache.clear()
            _cache[key] = SplitMix64(seed ^ _ORDER_KEY).fork(epoch).shuffle(range(n))
        out.append(_cache[key][pos])
    return out


def _u64_entry(v: int) -> np.ndarray:
    return np.frombuffer(np.uint64(v).tobytes(), dtype=np.uint8).copy()


def _u64_value(a: np.ndarray) -> int:
    return int(np.frombuffer(a.tobytes(), dtype=np.uint64)[0])


@dataclass
class TrainState:
    iteration: int
    rng: SplitMix64
    optimizer: SGD


@dataclass
class TrainResult:
    model: Module
    state: TrainState
    losses: List[float] = field(default_factory=list)
    log_lines: List[str] = field(default_factory=list)
    audit: List[Dict[str, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    seconds: float = 0.0


def init_state(model: Module, cfg: TrainConfig) -> TrainState:
    opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
    return TrainState(0, SplitMix64(cfg.seed).fork(_AUG_KEY), opt)


def checkpoint_entries(model: Module, state: TrainState, cfg: TrainConfig) -> Dict[str, np.ndarray]:
    if isinstance(model, RefineNet):
        entries = model_entries(model)
    else:
        entries = {k: p.data for k, p in model.named_parameters()}
    entries.update(state.optimizer.state_entries())
    entries["train.iteration"] = _u64_entry(state.iteration)
    entries["train.rng_state"] = _u64_entry(state.rng.state)
    entries["meta.train_config"] = np.frombuffer(json.dumps(asdict(cfg)).encode(), dtype=np.uint8)
    return entries


def save_training_checkpoint(path, model: Module, state: TrainState, cfg: TrainConfig):
    tmp = Path(str(path) + ".tmp")
    rntb.save_container(tmp, checkpoint_entries(model, state, cfg))
    tmp.replace(path)


def grad_norms(model: Module) -> Dict[str, float]:
    sq: Dict[str, float] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0].startswith("scale") and parts[0][5:].isdigit() else parts[0]
        g = 0.0 if p.grad is None else float(np.sum(p.grad.astype(np.float64) ** 2))
        sq[key] = sq.get(key, 0.0) + g
    return {k: math.sqrt(v) for k, v in sq.items()}


def clip_gradients(model: Module, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
    params = [p for p in model.parameters() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * p.dtype.type(scale)
    return total


def _write_audit(fh, path: Path, it: int, norms: Dict[str, float]):
    if fh is None:
        fresh = it == 1 or not path.exists()
        fh = open(path, "w" if fresh else "a")
        if fresh:
            fh.write("iter," + ",".join(norms) + "\n")
    fh.write(f"{it}," + ",".join(repr(v) for v in norms.values()) + "\n")
    return fh


def train(model: Module, dataset: Sequence[SegSample], cfg: TrainConfig,
          out_dir=None, state: Optional[TrainState] = None,
          num_classes: Optional[int] = None, until: Optional[int] = None) -> TrainResult:
    """Run up to ``cfg.iterations`` total iterations (continuing from ``state``).

    ``until`` stops early at that iteration count while keeping the
    schedule of the full run, so a later :func:`resume` continues it exactly.

    With ``out_dir`` set, ``train_log.csv`` is appended to and checkpoints
    are written every ``checkpoint_period`` iterations plus at the end. A
    non-finite loss raises :class:`TrainingDiverged` before any parameter
    update, leaving the last checkpoint on disk intact.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    k = num_classes if num_classes is not None else getattr(getattr(model, "spec", None), "num_classes", None)
    if k is not None:
        for i, s in enumerate(dataset):
            try:
                s.validate(k)
            except Exception as exc:
                raise ConfigError(f"sample {i}: {exc}") from exc
    state = state or init_state(model, cfg)
    aug = cfg.augment_spec()
    result = TrainResult(model, state)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = audit_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fresh = state.iteration == 0 or not log_path.exists()
        log_fh = open(log_path, "w" if fresh else "a")
        if fresh:
            log_fh.write("iter,loss,lr\n")
    stop = cfg.iterations if until is None else min(until, cfg.iterations)
    t0 = time.perf_counter()
    try:
        while state.iteration < stop:
            it = state.iteration
            idx = batch_indices(cfg.seed, it, cfg.batch_size, len(dataset))
            batch = [augment(dataset[i], aug, state.rng) if cfg.augment else dataset[i] for i in idx]
            images, masks = collate(batch)
            model.zero_grad()
            scores = model(images)
            loss = softmax_xent(scores, masks)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at iteration {it + 1}")
            loss.backward()
            if cfg.audit_grad:
                norms = grad_norms(model)
                result.audit.append(norms)
                if out is not None:
                    audit_fh = _write_audit(audit_fh, out / "grad_audit.csv", state.iteration + 1, norms)
            if cfg.clip_grad_norm:
                clip_gradients(model, cfg.clip_grad_norm)
            lr = cfg.lr_at(it)
            state.optimizer.step(lr)
            state.iteration += 1
            line = f"{state.iteration},{value!r},{lr!r}"
            result.losses.append(value)
            result.log_lines.append(line)
            if log_fh:
                log_fh.write(line + "\n")
            if out is not None and (
                    (cfg.checkpoint_period and state.iteration % cfg.checkpoint_period == 0)
                    or state.iteration == stop):
                path = out / f"ckpt_{state.iteration:06d}.rntc"
                save_training_checkpoint(path, model, state, cfg)
                save_training_checkpoint(out / "last.rntc", model, state, cfg)
                result.checkpoints.append(path)
    finally:
        for fh in (log_fh, audit_fh):
            if fh:
                fh.close()
    result.seconds = time.perf_counter() - t0
    return result


def restore(entries: Dict[str, np.ndarray], model: Module, cfg: TrainConfig) -> TrainState:
    """Optimizer buffers, data-stream position and iteration from a checkpoint."""
    missing = [k for k in ("train.iteration", "train.rng_state") if k not in entries]
    if missing:
        raise CheckpointMismatch("checkpoint lacks training state", [f"missing {k}" for k in missing])
    state = init_state(model, cfg)
    state.optimizer.load_entries(entries)
    state.iteration = _u64_value(entries["train.iteration"])
    state.rng.state = _u64_value(entries["train.rng_state"])
    return state


def resume(checkpoint, dataset: Sequence[SegSample], cfg: TrainConfig, spec=None,
           out_dir=None) -> TrainResult:
    """Continue training from ``checkpoint`` up to ``cfg.iterations``."""
    model, entries = load_checkpoint(checkpoint, spec)
    state = restore(entries, model, cfg)
    return train(model, dataset, cfg, out_dir=out_dir, state=state)
