"""Pieces shared by every training loop: batching, one optimisation step and the epoch log."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericDivergenceError
from .optim import OptimizerState, ScheduleConfig, clip_gradients, default_decay_mask, lr_at, optimizer_step


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 5e-4
    min_lr: float = 1e-5
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.05
    epochs: int = 200
    warmup_epochs: int = 5
    batch_size: int = 512
    clip: float | None = 3.0

    def schedule(self, n_items: int) -> ScheduleConfig:
        return ScheduleConfig(self.peak_lr, self.min_lr, self.warmup_epochs, self.epochs,
                              max(1, math.ceil(n_items / self.batch_size)))

    def optimizer(self) -> OptimizerState:
        return OptimizerState(betas=tuple(self.betas), weight_decay=self.weight_decay, base_lr=self.peak_lr)


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index arrays covering range(n); shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class Stepper:
    """Gradient clipping, the scheduled learning rate and AdamW for one named parameter set."""

    def __init__(self, params: dict, cfg: OptimConfig, n_items: int, lr_scale: dict | None = None):
        self.params = params
        self.cfg = cfg
        self.schedule = cfg.schedule(n_items)
        self.state = cfg.optimizer()
        self.decay_mask = default_decay_mask(params)
        self.lr_scale = lr_scale
        self.last_norm = 0.0
        self.last_lr = 0.0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.cfg.clip:
            grads, self.last_norm = clip_gradients(grads, self.cfg.clip)
        lr = lr_at(self.state.step, self.schedule)
        self.last_lr = lr
        ok = optimizer_step(self.params, grads, self.state, lr, self.lr_scale, self.decay_mask)
        self.zero_grad()
        if not ok and self.state.rejected_steps > 10:
            raise NumericDivergenceError("more than 10 optimizer steps rejected for non-finite gradients")
        return ok


class EpochLog:
    """Per-epoch CSV log; columns are fixed by the first row written.

    Wall-clock columns stay in memory only so the file is reproducible byte for byte.
    """

    VOLATILE = ("wall_s",)

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        self._fields = None

    def append(self, row: dict):
        self.rows.append(row)
        if self.path is None:
            return
        if self._fields is None:
            self._fields = [k for k in row if k not in self.VOLATILE]
            with open(self.path, "w", newline="") as fh:
                csv.DictWriter(fh, self._fields).writeheader()
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, self._fields, extrasaction="ignore").writerow(
                {k: _fmt(row.get(k)) for k in self._fields})

    def column(self, name) -> np.ndarray:
        return np.asarray([r[name] for r in self.rows], dtype=np.float64)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def moving_average(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        return np.asarray([x.mean()]) if len(x) else x
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window
