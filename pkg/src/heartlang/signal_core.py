"""Canonical multi-lead ECG records: repair, resampling, rescaling and synthesis."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from . import kernels
from .errors import (
    ConfigError,
    DegenerateScaleError,
    GenerationError,
    UnrecoverableRecordError,
)

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF",
                  "V1", "V2", "V3", "V4", "V5", "V6")

_LEAD_ALIASES = {name.upper(): name for name in STANDARD_LEADS}


def canonical_lead_name(name: str) -> str:
    """Map spellings such as ``AVR`` or ``avr`` onto the standard label."""
    key = name.strip().upper()
    return _LEAD_ALIASES.get(key, name.strip())


def lead_position(name: str) -> int | None:
    """0-based index in the standard 12-lead ordering, or None for other leads."""
    try:
        return STANDARD_LEADS.index(canonical_lead_name(name))
    except ValueError:
        return None


@dataclass(frozen=True)
class EcgRecord:
    samples: np.ndarray  # (C, T) millivolts
    sampling_rate: float
    lead_names: tuple
    record_id: str = ""
    annotations: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ConfigError(f"record samples must be a non-empty C x T matrix, got {samples.shape}")
        if self.sampling_rate <= 0:
            raise ConfigError("sampling_rate must be positive")
        names = tuple(canonical_lead_name(n) for n in self.lead_names)
        if len(names) != samples.shape[0]:
            raise ConfigError(f"{len(names)} lead names for {samples.shape[0]} leads")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "lead_names", names)
        object.__setattr__(self, "sampling_rate", float(self.sampling_rate))

    @property
    def n_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate

    def replace(self, **changes) -> "EcgRecord":
        return dataclasses.replace(self, **changes)

    def lead(self, name: str) -> np.ndarray:
        name = canonical_lead_name(name)
        try:
            return self.samples[self.lead_names.index(name)]
        except ValueError:
            raise ConfigError(f"lead {name!r} not present in record {self.record_id!r}") from None

    def in_standard_order(self) -> "EcgRecord":
        """Reorder standard leads into I, II, III, aVR, aVL, aVF, V1-V6 order."""
        positions = [lead_position(n) for n in self.lead_names]
        if any(p is None for p in positions):
            return self
        order = np.argsort(positions, kind="stable")
        if np.all(order == np.arange(len(order))):
            return self
        return self.replace(samples=self.samples[order],
                            lead_names=tuple(self.lead_names[i] for i in order))


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate: float = 100.0
    rescale_range: tuple | None = None
    repair_window: int = 6

    def __post_init__(self):
        if self.target_rate <= 0:
            raise ConfigError("target_rate must be positive")
        if self.rescale_range is not None:
            lo, hi = self.rescale_range
            if not lo < hi:
                raise ConfigError("rescale_range needs lo < hi")
            object.__setattr__(self, "rescale_range", (float(lo), float(hi)))
        if self.repair_window < 2 or self.repair_window % 2:
            raise ConfigError("repair_window must be a positive even neighbour count")


def repair_nonfinite(record: EcgRecord, neighbors: int = 6) -> EcgRecord:
    """Replace NaN/Inf samples with the mean of the nearest finite samples on the same lead.

    Uses ``neighbors // 2`` samples on each side; near a boundary the window
    slides so that ``neighbors`` finite samples are still averaged.
    """
    samples = record.samples
    if np.isfinite(samples).all():
        return record
    out = np.empty_like(samples)
    for c in range(samples.shape[0]):
        lead, n_bad = kernels.repair_lead(np.ascontiguousarray(samples[c]), neighbors)
        if n_bad < 0:
            raise UnrecoverableRecordError(
                f"record {record.record_id!r} lead {record.lead_names[c]} has fewer than "
                f"{neighbors} finite samples")
        out[c] = lead
    return record.replace(samples=out)


@lru_cache(maxsize=32)
def _decimation_filter(up: int, down: int, attenuation_db: float = 80.0) -> np.ndarray:
    # passband to 0.8 of the target Nyquist, stopband from the target Nyquist
    m = max(up, down)
    width = 0.2 / m
    numtaps, beta = sps.kaiserord(attenuation_db, width)
    numtaps |= 1
    return sps.firwin(numtaps, 0.9 / m, window=("kaiser", beta))


def resample(record: EcgRecord, target_rate: float) -> EcgRecord:
    """Polyphase resampling with an anti-aliasing FIR (>= 80 dB stopband)."""
    if target_rate <= 0:
        raise ConfigError("target_rate must be positive")
    if target_rate > record.sampling_rate:
        raise ConfigError(
            f"upsampling {record.sampling_rate} -> {target_rate} Hz is not supported")
    if target_rate == record.sampling_rate:
        return record
    ratio = Fraction(target_rate / record.sampling_rate).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(record.n_samples * target_rate / record.sampling_rate))
    if n_out < 1:
        raise ConfigError("record too short for the requested rate")
    h = _decimation_filter(up, down)
    out = sps.resample_poly(record.samples, up, down, axis=1, window=h, padtype="line")
    if out.shape[1] >= n_out:
        out = out[:, :n_out]
    else:
        out = np.pad(out, ((0, 0), (0, n_out - out.shape[1])), mode="edge")
    return record.replace(samples=out, sampling_rate=float(target_rate))


def rescale(record: EcgRecord, lo: float, hi: float) -> EcgRecord:
    """Affine map of the record's global min/max onto ``[lo, hi]`` (all leads jointly)."""
    if not lo < hi:
        raise ConfigError("rescale needs lo < hi")
    mn = float(record.samples.min())
    mx = float(record.samples.max())
    if not mx > mn:
        raise DegenerateScaleError(f"record {record.record_id!r} is constant")
    if mn == lo and mx == hi:
        return record
    out = lo + (record.samples - mn) * ((hi - lo) / (mx - mn))
    np.clip(out, lo, hi, out=out)
    return record.replace(samples=out)


def preprocess(record: EcgRecord, config: PreprocessConfig) -> EcgRecord:
    """repair -> resample -> optional rescale, leads in standard order."""
    record = repair_nonfinite(record.in_standard_order(), config.repair_window)
    if record.sampling_rate != config.target_rate:
        record = resample(record, config.target_rate)
    if config.rescale_range is not None:
        record = rescale(record, *config.rescale_range)
    return record


# ---------------------------------------------------------------------------
# synthetic generator

# R-wave gain and S-wave depth per standard lead; loosely follows a normal axis.
_R_GAIN = (1.0, 1.2, 0.4, -0.9, 0.5, 0.8, 0.3, 0.5, 0.9, 1.3, 1.4, 1.1)
_S_DEPTH = (0.1, 0.2, 0.2, 0.0, 0.1, 0.2, 1.0, 1.2, 0.7, 0.4, 0.2, 0.1)
_T_GAIN = (0.3, 0.4, 0.1, -0.3, 0.15, 0.25, -0.1, 0.3, 0.45, 0.5, 0.4, 0.3)
_P_GAIN = (0.1, 0.15, 0.05, -0.1, 0.05, 0.1, 0.05, 0.08, 0.08, 0.08, 0.08, 0.08)


@dataclass(frozen=True)
class MorphologyParams:
    qrs_sigma_s: float = 0.012
    s_offset_s: float = 0.025
    p_offset_s: float = -0.16
    p_sigma_s: float = 0.025
    p_scale: float = 1.0
    t_offset_s: float = 0.28
    t_sigma_s: float = 0.05
    t_scale: float = 1.0
    amplitude: float = 1.0
    lead_gains: tuple | None = None  # overrides the R gains (12 values)
    rr_jitter: float = 0.0  # relative std of beat-to-beat interval
    amp_jitter: float = 0.0  # relative std of per-beat amplitude
    noise_std: float = 0.0
    drift_amp: float = 0.0
    drift_hz: float = 0.25
    dropped_beats: tuple = ()  # beat indices with no complex


def beat_times(bpm: float, duration_s: float, rr_jitter: float = 0.0,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Beat centres in seconds: floor(duration * bpm / 60) beats, half an interval from the start."""
    if not 20 <= bpm <= 300:
        raise ConfigError("bpm must lie in [20, 300]")
    rr = 60.0 / bpm
    n = int(math.floor(duration_s / rr + 1e-9))
    if n < 1:
        raise GenerationError(f"{duration_s} s is too short for one beat at {bpm} bpm")
    times = (np.arange(n) + 0.5) * rr
    if rr_jitter > 0 and n > 1:
        if rng is None:
            rng = np.random.default_rng(0)
        steps = rr * (1.0 + rr_jitter * rng.standard_normal(n - 1))
        steps = np.clip(steps, 0.35 * rr, None)
        times = 0.5 * rr + np.concatenate([[0.0], np.cumsum(steps)])
        # squeeze back into the window so the beat count stays exact
        last = duration_s - 0.5 * rr
        if times[-1] > last:
            times = 0.5 * rr + (times - 0.5 * rr) * ((last - 0.5 * rr) / (times[-1] - 0.5 * rr))
    return times


def synthesize_ecg(bpm: float, sampling_rate: float = 100.0, duration_s: float = 10.0,
                   morphology_params: MorphologyParams | None = None, rng_seed: int = 0,
                   record_id: str | None = None) -> EcgRecord:
    """Parametric 12-lead ECG built from Gaussian bumps.

    Ground-truth R-peak sample positions are stored in
    ``record.annotations["qrs_samples"]``.
    """
    mp = morphology_params or MorphologyParams()
    rng = np.random.default_rng(rng_seed)
    times = beat_times(bpm, duration_s, mp.rr_jitter, rng)
    n_samples = int(round(duration_s * sampling_rate))
    if n_samples < 1:
        raise GenerationError("duration too short")
    keep = np.ones(len(times), dtype=bool)
    for i in mp.dropped_beats:
        if 0 <= i < len(times):
            keep[i] = False
    times = times[keep]
    t = np.arange(n_samples) / sampling_rate
    r_gain = np.asarray(mp.lead_gains if mp.lead_gains is not None else _R_GAIN, dtype=np.float64)
    if r_gain.shape != (12,):
        raise ConfigError("lead_gains needs 12 values")
    beat_amp = np.ones(len(times))
    if mp.amp_jitter > 0:
        beat_amp = np.clip(1.0 + mp.amp_jitter * rng.standard_normal(len(times)), 0.5, 1.5)

    def bumps(offset, sigma):
        out = np.zeros(n_samples)
        for bt, a in zip(times, beat_amp):
            c = bt + offset
            lo = max(0, int((c - 5 * sigma) * sampling_rate))
            hi = min(n_samples, int((c + 5 * sigma) * sampling_rate) + 2)
            if lo < hi:
                out[lo:hi] += a * np.exp(-0.5 * ((t[lo:hi] - c) / sigma) ** 2)
        return out

    r_wave = bumps(0.0, mp.qrs_sigma_s)
    s_wave = bumps(mp.s_offset_s, mp.qrs_sigma_s)
    p_wave = bumps(mp.p_offset_s, mp.p_sigma_s)
    t_wave = bumps(mp.t_offset_s, mp.t_sigma_s)
    samples = (np.outer(r_gain, r_wave)
               - np.outer(np.asarray(_S_DEPTH) * np.abs(r_gain).max(), s_wave) * 0.5
               + mp.t_scale * np.outer(_T_GAIN, t_wave)
               + mp.p_scale * np.outer(_P_GAIN, p_wave))
    samples *= mp.amplitude
    if mp.drift_amp > 0:
        phase = rng.uniform(0, 2 * np.pi, size=(12, 1))
        samples += mp.drift_amp * np.sin(2 * np.pi * mp.drift_hz * t[None, :] + phase)
    if mp.noise_std > 0:
        samples += mp.noise_std * rng.standard_normal(samples.shape)
    peaks = np.round(times * sampling_rate).astype(np.int64)
    peaks = peaks[(peaks >= 0) & (peaks < n_samples)]
    rid = record_id if record_id is not None else f"synth-{bpm:g}bpm-{rng_seed}"
    return EcgRecord(samples, sampling_rate, STANDARD_LEADS, rid,
                     annotations={"qrs_samples": peaks, "bpm": float(bpm)})
