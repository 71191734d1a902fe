"""QRS detection and heartbeat-token sentence assembly.

A record becomes an ``l x t`` sentence: every lead is cut into beat-centred
patches using the QRS positions found on lead I, leads are concatenated in
standard order, and the result is padded or truncated to ``l`` rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from . import kernels
from .errors import ConfigError, EmptyTokenizationError
from .signal_core import STANDARD_LEADS, EcgRecord, canonical_lead_name, lead_position

log = logging.getLogger(__name__)

MAX_TEMPORAL_ID = 10
MAX_SPATIAL_ID = 12

LEAD_CONFIGS = {
    1: ("I",),
    2: ("I", "II"),
    3: ("I", "II", "V2"),
    6: ("I", "II", "III", "aVR", "aVL", "aVF"),
    12: STANDARD_LEADS,
}


@dataclass(frozen=True)
class ThresholdPolicy:
    init_percentile: float = 100.0
    init_scale: float = 0.25
    init_window_s: float = 2.0
    keep: float = 0.75
    signal_ratio: float = 0.5
    noise_decay: float = 0.875
    window: int = 8
    searchback: float = 1.66
    twave_window_s: float = 0.36
    twave_ratio: float = 0.5


@dataclass(frozen=True)
class TokenizerConfig:
    t: int = 96
    l: int = 256
    band: tuple = (5.0, 20.0)
    refractory_s: float = 0.2
    ricker_half_s: float = 0.1
    detection_rate: float = 100.0
    threshold: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    mode: str = "heartbeat"
    fixed_window_stride: int | None = None
    leads: tuple | None = None

    def __post_init__(self):
        if self.t <= 0 or self.l <= 0:
            raise ConfigError("t and l must be positive")
        lo, hi = self.band
        if not 0 < lo < hi < self.detection_rate / 2:
            raise ConfigError(f"band {self.band} must satisfy 0 < lo < hi < {self.detection_rate / 2}")
        if self.mode not in ("heartbeat", "fixed_window"):
            raise ConfigError(f"unknown tokenizer mode {self.mode!r}")
        if self.fixed_window_stride is not None and self.fixed_window_stride <= 0:
            raise ConfigError("fixed_window_stride must be positive")
        if self.leads is not None:
            leads = tuple(canonical_lead_name(n) for n in self.leads)
            unknown = [n for n in leads if n not in STANDARD_LEADS]
            if unknown:
                raise ConfigError(f"unknown lead names {unknown}")
            object.__setattr__(self, "leads", leads)

    @property
    def stride(self) -> int:
        return self.fixed_window_stride or self.t


@dataclass(frozen=True)
class QrsIndices:
    indices: np.ndarray
    detection_rate: float

    def __len__(self):
        return len(self.indices)


@dataclass
class EcgWord:
    patch: np.ndarray
    lead_index: int
    qrs_sample: int
    is_pad: bool = False


@dataclass
class EcgSentence:
    words: np.ndarray          # (l, t) float32
    spatial_ids: np.ndarray    # (l,) int64, 0 marks padding
    temporal_ids: np.ndarray   # (l,) int64, 0 marks padding
    pad_mask: np.ndarray       # (l,) bool
    source_record_id: str = ""
    qrs_count: int = 0

    @property
    def length(self) -> int:
        return self.words.shape[0]

    @property
    def n_real(self) -> int:
        return int((~self.pad_mask).sum())


def ricker(points: int, a: float) -> np.ndarray:
    """Mexican-hat wavelet sampled on ``points`` taps with width parameter ``a``."""
    x = np.arange(points) - (points - 1) / 2.0
    amp = 2.0 / (math.sqrt(3.0 * a) * math.pi ** 0.25)
    return amp * (1.0 - (x / a) ** 2) * np.exp(-0.5 * (x / a) ** 2)


def mwi_signal(lead: np.ndarray, fs: float, config: TokenizerConfig) -> np.ndarray:
    """Band-pass, convolve with a Ricker wavelet, square."""
    lead = np.asarray(lead, dtype=np.float64)
    lo, hi = config.band
    if hi >= fs / 2:
        raise ConfigError(f"band edge {hi} Hz is above the Nyquist frequency of {fs} Hz")
    sos = sps.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), len(lead) - 1)
    filtered = sps.sosfiltfilt(sos, lead, padlen=max(padlen, 0)) if len(lead) > 1 else lead
    half = max(1, int(round(config.ricker_half_s * fs)))
    wavelet = ricker(2 * half + 1, half / 4.0)
    integrated = np.convolve(filtered, wavelet, mode="same")
    return integrated ** 2


def detect_qrs(record: EcgRecord, config: TokenizerConfig | None = None) -> QrsIndices:
    config = config or TokenizerConfig()
    fs = record.sampling_rate
    lead = record.lead("I")
    mwi = mwi_signal(lead, fs, config)
    peak_max = float(mwi.max()) if mwi.size else 0.0
    if not peak_max > 1e-12:
        return QrsIndices(np.zeros(0, dtype=np.int64), fs)
    positions = kernels.local_maxima(np.ascontiguousarray(mwi))
    if positions.size == 0:
        return QrsIndices(np.zeros(0, dtype=np.int64), fs)
    heights = np.ascontiguousarray(mwi[positions])
    policy = config.threshold
    early = heights[positions < policy.init_window_s * fs]
    init = policy.init_scale * float(
        np.percentile(early if early.size else heights, policy.init_percentile))
    accepted = kernels.scan_peaks(
        heights, np.ascontiguousarray(positions, dtype=np.int64),
        int(round(config.refractory_s * fs)), init, 1e-6 * peak_max,
        policy.keep, policy.signal_ratio, policy.noise_decay, policy.window, policy.searchback,
        int(round(policy.twave_window_s * fs)), policy.twave_ratio)
    return QrsIndices(np.asarray(accepted, dtype=np.int64), fs)


def _record_lead_ids(record: EcgRecord) -> list:
    ids = []
    for c, name in enumerate(record.lead_names):
        pos = lead_position(name)
        ids.append(pos if pos is not None else c)
    return ids


def _beat_bounds(q: np.ndarray, n_samples: int, t: int):
    """Per-beat [start, stop) sample ranges: midpoint boundaries, centred crop to t."""
    q = np.asarray(q, dtype=np.int64)
    mids = (q[:-1] + q[1:]) // 2
    lo = np.concatenate([[0], mids])
    hi = np.concatenate([mids, [n_samples]])
    start = np.maximum(lo, q - t // 2)
    stop = np.minimum(hi, q - t // 2 + t)
    return start, np.maximum(stop, start)


def segment_matrix(samples: np.ndarray, q, t: int) -> np.ndarray:
    """(C, N, t) array of beat patches, shorter segments zero-padded symmetrically."""
    samples = np.asarray(samples)
    start, stop = _beat_bounds(q, samples.shape[1], t)
    out = np.zeros((samples.shape[0], len(start), t), dtype=np.float32)
    for i, (a, b) in enumerate(zip(start, stop)):
        width = b - a
        left = (t - width) // 2
        out[:, i, left:left + width] = samples[:, a:b]
    return out


def segment_words(record: EcgRecord, q: QrsIndices, t: int) -> list:
    """One list of ``EcgWord`` per lead, words in temporal order."""
    if len(q) == 0:
        raise EmptyTokenizationError(f"no QRS complexes in record {record.record_id!r}")
    patches = segment_matrix(record.samples, q.indices, t)
    lead_ids = _record_lead_ids(record)
    return [[EcgWord(patches[c, i], lead_ids[c], int(q.indices[i])) for i in range(len(q))]
            for c in range(record.n_leads)]


def build_sentence(words, l: int, config: TokenizerConfig | None = None,
                   sampling_rate: float | None = None, source_record_id: str = "",
                   qrs_count: int = 0) -> EcgSentence:
    """Lead-major concatenation padded with zero words or truncated from the tail to ``l``."""
    config = config or TokenizerConfig()
    rate = sampling_rate or config.detection_rate
    flat = [w for lead_words in words for w in lead_words][:l]
    t = config.t if not flat else len(flat[0].patch)
    out = np.zeros((l, t), dtype=np.float32)
    spatial = np.zeros(l, dtype=np.int64)
    temporal = np.zeros(l, dtype=np.int64)
    pad = np.ones(l, dtype=bool)
    for j, w in enumerate(flat):
        if w.is_pad:
            continue
        out[j] = w.patch
        spatial[j] = w.lead_index + 1
        temporal[j] = min(MAX_TEMPORAL_ID, int(math.floor(w.qrs_sample / rate)) + 1)
        pad[j] = False
    return EcgSentence(out, spatial, temporal, pad, source_record_id, qrs_count)


def _assemble(patches: np.ndarray, anchors: np.ndarray, lead_ids, l: int, rate: float,
              record_id: str, qrs_count: int) -> EcgSentence:
    # vectorised twin of build_sentence for (C, N, t) patch blocks
    c, n, t = patches.shape
    flat = patches.reshape(c * n, t)[:l]
    m = flat.shape[0]
    out = np.zeros((l, t), dtype=np.float32)
    out[:m] = flat
    spatial = np.zeros(l, dtype=np.int64)
    temporal = np.zeros(l, dtype=np.int64)
    spatial[:m] = np.repeat(np.asarray(lead_ids, dtype=np.int64) + 1, n)[:m]
    tid = np.minimum(MAX_TEMPORAL_ID, np.floor(np.asarray(anchors) / rate).astype(np.int64) + 1)
    temporal[:m] = np.tile(tid, c)[:m]
    pad = np.ones(l, dtype=bool)
    pad[:m] = False
    return EcgSentence(out, spatial, temporal, pad, record_id, qrs_count)


def select_leads(record: EcgRecord, leads) -> EcgRecord:
    if leads is None:
        return record
    rows = []
    for name in leads:
        name = canonical_lead_name(name)
        if name not in record.lead_names:
            raise ConfigError(f"lead {name} missing from record {record.record_id!r}")
        rows.append(record.lead_names.index(name))
    return record.replace(samples=record.samples[rows],
                          lead_names=tuple(record.lead_names[i] for i in rows))


def tokenize_heartbeat(record: EcgRecord, config: TokenizerConfig) -> EcgSentence:
    q = detect_qrs(record, config)
    if len(q) == 0:
        raise EmptyTokenizationError(f"no QRS complexes in record {record.record_id!r}")
    chosen = select_leads(record, config.leads)
    patches = segment_matrix(chosen.samples, q.indices, config.t)
    return _assemble(patches, q.indices, _record_lead_ids(chosen), config.l,
                     record.sampling_rate, record.record_id, len(q))


def tokenize_fixed_window(record: EcgRecord, t: int, stride: int | None, l: int,
                          leads=None) -> EcgSentence:
    """Non-overlapping (by default) fixed windows per lead, assembled like heartbeat sentences."""
    stride = stride or t
    if record.n_samples < t:
        raise EmptyTokenizationError(
            f"record {record.record_id!r} has {record.n_samples} samples, fewer than t={t}")
    chosen = select_leads(record, leads)
    starts = np.arange(0, record.n_samples - t + 1, stride, dtype=np.int64)
    idx = starts[:, None] + np.arange(t)[None, :]
    patches = chosen.samples[:, idx].astype(np.float32)
    return _assemble(patches, starts, _record_lead_ids(chosen), l,
                     record.sampling_rate, record.record_id, 0)


def tokenize(record: EcgRecord, config: TokenizerConfig) -> EcgSentence:
    if config.mode == "fixed_window":
        return tokenize_fixed_window(record, config.t, config.stride, config.l, config.leads)
    return tokenize_heartbeat(record, config)


def lead_subset(config: TokenizerConfig, lead_config) -> TokenizerConfig:
    """Restrict the tokenizer to one of the reduced-lead sets (1, 2, 3, 6 or 12 leads)."""
    if isinstance(lead_config, int):
        if lead_config not in LEAD_CONFIGS:
            raise ConfigError(f"no {lead_config}-lead configuration; choose from {sorted(LEAD_CONFIGS)}")
        leads = LEAD_CONFIGS[lead_config]
    else:
        leads = tuple(lead_config)
    return replace(config, leads=leads)
