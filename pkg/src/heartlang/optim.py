"""Decoupled-weight-decay Adam, warmup + cosine schedule, clipping and layer-wise decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    base_lr: float = 1e-3
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rejected_steps: int = 0


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float,
                   lr_scale: dict | None = None, decay_mask: dict | None = None) -> bool:
    """One AdamW update in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)

    ``params`` maps names to arrays (or objects with ``.data``). Returns False
    and leaves everything untouched when any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            state.rejected_steps += 1
            log.warning("rejected optimizer step %d: non-finite gradient in %s", state.step + 1, name)
            return False
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1 if c1 > 0 else m
        v_hat = v / c2 if c2 > 0 else v
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        wd = state.weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        if wd:
            update = update + wd * arr
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        arr -= (step_lr * update).astype(arr.dtype, copy=False)
    return True


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    total_epochs: int = 200
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.min_lr > self.peak_lr:
            raise ConfigError("min_lr must not exceed peak_lr")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ConfigError("warmup_epochs must be smaller than total_epochs")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine annealing down to ``min_lr`` at the last step."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    warm = schedule.warmup_steps
    if warm > 0 and step < warm:
        return schedule.peak_lr * step / warm
    span = schedule.total_steps - warm
    progress = 1.0 if span <= 0 else min(1.0, (step - warm) / span)
    return schedule.min_lr + 0.5 * (schedule.peak_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                         for g in grads.values() if g is not None))


def clip_gradients(grads: dict, max_norm: float):
    """Rescale all gradients together when their global l2 norm exceeds ``max_norm``.

    Returns ``(grads, norm_before)``.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    norm = global_norm(grads)
    # a non-finite norm is left for optimizer_step to reject
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        grads = {k: (None if g is None else (g * scale).astype(g.dtype, copy=False))
                 for k, g in grads.items()}
    return grads, norm


def layer_decay_lrs(depth_index: int, base_lr: float, decay: float, depth: int) -> float:
    """Learning rate of group ``depth_index`` (0 = embeddings, ``depth`` = head)."""
    if not 0 < decay <= 1:
        raise ConfigError("layer decay must lie in (0, 1]")
    if not 0 <= depth_index <= depth:
        raise ConfigError(f"group index {depth_index} outside [0, {depth}]")
    return base_lr * decay ** (depth - depth_index)


def default_decay_mask(params: dict) -> dict:
    """Weight decay on matrices only; biases, norms and 1-D tokens are exempt."""
    return {k: np.ndim(p.data if hasattr(p, "data") else p) >= 2 for k, p in params.items()}
