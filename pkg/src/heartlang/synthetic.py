"""Labelled synthetic 12-lead corpora for desk-scale experiments.

Five generator regimes: normal sinus rhythm and four abnormal ones, each
owning one label column (normal records are all-zero rows).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import substream
from .signal_core import EcgRecord, MorphologyParams, synthesize_ecg

CLASS_NAMES = ("bradycardia", "tachycardia", "wide_qrs", "dropped_beat")
CONDITIONS = ("normal",) + CLASS_NAMES
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 256
    mixture: dict = field(default_factory=lambda: {c: 0.2 for c in CONDITIONS})
    split_fractions: dict = field(default_factory=lambda: {"train": 0.7, "valid": 0.15, "test": 0.15})
    sampling_rate: float = 100.0
    duration_s: float = 10.0
    normal_bpm: tuple = (55.0, 100.0)
    brady_bpm: tuple = (35.0, 48.0)
    tachy_bpm: tuple = (125.0, 160.0)
    wide_qrs_sigma_s: tuple = (0.026, 0.034)
    noise_std: tuple = (0.01, 0.05)
    drift_amp: tuple = (0.0, 0.1)
    amplitude: tuple = (0.7, 1.3)
    rr_jitter: float = 0.03
    amp_jitter: float = 0.05

    def __post_init__(self):
        if self.n_records < 1:
            raise ConfigError("n_records must be >= 1")
        unknown = set(self.mixture) - set(CONDITIONS)
        if unknown:
            raise ConfigError(f"unknown conditions {sorted(unknown)}")
        if any(v < 0 for v in self.mixture.values()) or sum(self.mixture.values()) <= 0:
            raise ConfigError("mixture weights must be non-negative with a positive sum")
        if set(self.split_fractions) - set(SPLITS) or sum(self.split_fractions.values()) <= 0:
            raise ConfigError(f"split fractions must use {SPLITS}")


@dataclass
class SyntheticRecord:
    record: EcgRecord
    condition: str
    labels: np.ndarray
    split: str


def allocate(total: int, weights: dict) -> dict:
    """Largest-remainder apportionment: counts sum to ``total`` exactly."""
    keys = list(weights)
    w = np.asarray([weights[k] for k in keys], dtype=np.float64)
    quota = total * w / w.sum()
    base = np.floor(quota).astype(int)
    rest = total - base.sum()
    order = sorted(range(len(keys)), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return {k: int(n) for k, n in zip(keys, base)}


def _labels(condition: str) -> np.ndarray:
    y = np.zeros(len(CLASS_NAMES), dtype=np.int64)
    if condition != "normal":
        y[CLASS_NAMES.index(condition)] = 1
    return y


def _morphology(condition: str, bpm: float, cfg: SynthConfig, rng) -> MorphologyParams:
    u = lambda r: float(rng.uniform(*r))  # noqa: E731
    gains = np.asarray((1.0, 1.2, 0.4, -0.9, 0.5, 0.8, 0.3, 0.5, 0.9, 1.3, 1.4, 1.1))
    gains = gains * rng.uniform(0.8, 1.2, size=12)
    kw = dict(amplitude=u(cfg.amplitude), lead_gains=tuple(gains), rr_jitter=cfg.rr_jitter,
              amp_jitter=cfg.amp_jitter, noise_std=u(cfg.noise_std), drift_amp=u(cfg.drift_amp),
              t_scale=float(rng.uniform(0.7, 1.3)), p_scale=float(rng.uniform(0.7, 1.3)))
    if condition == "wide_qrs":
        kw["qrs_sigma_s"] = u(cfg.wide_qrs_sigma_s)
        kw["s_offset_s"] = 2.0 * kw["qrs_sigma_s"]
    if condition == "dropped_beat":
        n_beats = int(cfg.duration_s * bpm / 60.0)
        k = 1 if n_beats < 8 else 2
        kw["dropped_beats"] = tuple(int(i) for i in sorted(rng.choice(np.arange(2, n_beats - 2), k, replace=False)))
    return MorphologyParams(**kw)


def _bpm(condition: str, cfg: SynthConfig, rng) -> float:
    span = {"bradycardia": cfg.brady_bpm, "tachycardia": cfg.tachy_bpm}.get(condition, cfg.normal_bpm)
    return float(rng.uniform(*span))


def generate_corpus(cfg: SynthConfig, seed: int = 0) -> list:
    """Exact class counts, splits stratified per condition, order shuffled by seed."""
    counts = allocate(cfg.n_records, cfg.mixture)
    rng = substream(seed, "synth.records")
    plan = []
    for cond in CONDITIONS:
        n = counts.get(cond, 0)
        per_split = allocate(n, cfg.split_fractions) if n else {}
        tags = [s for s in SPLITS for _ in range(per_split.get(s, 0))]
        plan.extend((cond, s) for s in tags)
    order = rng.permutation(len(plan))
    out = []
    for i, j in enumerate(order):
        cond, split = plan[j]
        rec_rng = substream(seed, f"synth.record.{i}")
        bpm = _bpm(cond, cfg, rec_rng)
        mp = _morphology(cond, bpm, cfg, rec_rng)
        rec = synthesize_ecg(bpm, cfg.sampling_rate, cfg.duration_s, mp,
                             rng_seed=int(rec_rng.integers(2**31)), record_id=f"syn{i:05d}")
        rec = rec.replace(annotations={**rec.annotations, "condition": cond})
        out.append(SyntheticRecord(rec, cond, _labels(cond), split))
    return out
