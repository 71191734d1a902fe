"""Frozen-backbone linear probing, macro AUC and low-resource subsets."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, DataError, MetricUndefinedError
from .optim import OptimizerState, ScheduleConfig, default_decay_mask, lr_at, optimizer_step
from .rng import substream
from .st_ecgformer import EncoderState, forward_features
from .storage import SentenceCorpus
from .tensor import Tensor
from .training import batches

log = logging.getLogger(__name__)


# -- metric -----------------------------------------------------------------------------

def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = kernels.midranks(np.ascontiguousarray(values[order], dtype=np.float64))
    return ranks


def binary_auc(scores, labels) -> float:
    """Mann-Whitney area under the ROC curve, ties counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative")
    r = _ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc_report(scores, labels, class_names=None) -> dict:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise DataError(f"scores {s.shape} and labels {y.shape} differ")
    names = list(class_names) if class_names else [str(i) for i in range(s.shape[1])]
    per_class, skipped = {}, []
    for c in range(s.shape[1]):
        pos = int(y[:, c].sum())
        if pos == 0 or pos == y.shape[0]:
            skipped.append(names[c])
            continue
        per_class[names[c]] = binary_auc(s[:, c], y[:, c])
    if not per_class:
        raise MetricUndefinedError("no class has both positives and negatives")
    if skipped:
        log.warning("macro AUC skipped degenerate classes %s", skipped)
    return {"macro_auc": float(np.mean(list(per_class.values()))), "per_class": per_class, "skipped": skipped}


def macro_auc(scores, labels) -> float:
    """Mean one-vs-rest AUC over the classes that have both outcomes."""
    return macro_auc_report(scores, labels)["macro_auc"]


# -- subsets ----------------------------------------------------------------------------

def subset_size(n: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    return max(1, int(math.floor(n * fraction + 0.5)))


def low_resource_subset(train_indices, fraction: float, seed: int = 0) -> np.ndarray:
    """Prefix of one seeded permutation, so smaller fractions nest inside larger ones."""
    idx = np.asarray(train_indices, dtype=np.int64)
    if fraction == 1.0:
        return idx.copy()
    perm = substream(seed, "subset").permutation(idx.size)
    return idx[np.sort(perm[:subset_size(idx.size, fraction)])]


# -- features ---------------------------------------------------------------------------

class FeatureExtractor:
    """Frozen-encoder features with an on-disk cache keyed by checkpoint and corpus."""

    def __init__(self, cache_dir=None, batch_size: int = 64):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.batch_size = batch_size
        self.encoder_runs = 0

    @staticmethod
    def corpus_key(corpus: SentenceCorpus) -> str:
        h = hashlib.sha256()
        for a in (corpus.words, corpus.spatial_ids, corpus.temporal_ids, corpus.pad_mask):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def __call__(self, corpus: SentenceCorpus, encoder: EncoderState, checkpoint_key: str,
                 pooling: str = "cls") -> np.ndarray:
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"features-{checkpoint_key[:16]}-{self.corpus_key(corpus)}-{pooling}.npy"
            if path.exists():
                return np.load(path)
        feats = extract_features(corpus, encoder, pooling, self.batch_size)
        self.encoder_runs += 1
        if path is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            np.save(path, feats)
        return feats


def extract_features(corpus: SentenceCorpus, encoder: EncoderState, pooling: str = "cls",
                     batch_size: int = 64) -> np.ndarray:
    if corpus.l > encoder.config.max_len or corpus.t != encoder.config.patch_width:
        raise ConfigError(f"corpus sentences {corpus.l}x{corpus.t} do not fit encoder "
                          f"{encoder.config.max_len}x{encoder.config.patch_width}")
    out = np.empty((len(corpus), encoder.config.hidden), dtype=np.float32)
    for b in batches(len(corpus), batch_size):
        out[b] = forward_features(corpus.words[b], corpus.spatial_ids[b], corpus.temporal_ids[b],
                                  encoder, corpus.pad_mask[b], pooling)
    return out


# -- probe ------------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    peak_lr: float = 5e-3
    min_lr: float = 1e-5
    epochs: int = 100
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    batch_size: int = 256
    standardize: bool = True


@dataclass
class ProbeHead:
    weight: np.ndarray          # (D, L)
    bias: np.ndarray            # (L,)
    mean: np.ndarray            # (D,) feature standardisation
    scale: np.ndarray           # (D,)
    epoch: int = 0
    valid_auc: float = float("nan")
    history: list = field(default_factory=list)

    def scores(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight + self.bias


def train_probe(features, labels, split, config: ProbeConfig = ProbeConfig(), seed: int = 0,
                train_index=None) -> ProbeHead:
    """Sigmoid cross-entropy linear head; returns the epoch with the best validation macro AUC.

    ``split`` holds per-row tags; ``train_index`` optionally narrows the
    training rows (low-resource runs).
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    split = np.asarray(split)
    tr = np.flatnonzero(split == "train") if train_index is None else np.asarray(train_index)
    va = np.flatnonzero(split == "valid")
    if tr.size == 0 or va.size == 0:
        raise DataError("probe needs non-empty train and valid splits")
    valid_classes = [c for c in range(Y.shape[1]) if 0 < Y[va, c].sum() < va.size]
    if len(valid_classes) < Y.shape[1]:
        log.warning("classes %s absent or saturated in validation; excluded from model selection",
                    sorted(set(range(Y.shape[1])) - set(valid_classes)))
    if not valid_classes:
        raise MetricUndefinedError("no class usable for validation")
    if config.standardize:
        mean = X[tr].mean(axis=0)
        scale = X[tr].std(axis=0) + 1e-6 if tr.size > 1 else np.ones(X.shape[1])
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = (X - mean) / scale
    D, L = X.shape[1], Y.shape[1]
    params = {"w": Tensor(np.zeros((D, L))), "b": Tensor(np.zeros(L))}
    steps = max(1, math.ceil(tr.size / config.batch_size))
    sched = ScheduleConfig(config.peak_lr, config.min_lr, config.warmup_epochs, config.epochs, steps)
    opt = OptimizerState(betas=tuple(config.betas), weight_decay=config.weight_decay, base_lr=config.peak_lr)
    decay = default_decay_mask(params)
    rng = substream(seed, "data.probe")
    best = None
    history = []
    for epoch in range(1, config.epochs + 1):
        for b in batches(tr.size, config.batch_size, rng):
            rows = tr[b]
            for p in params.values():
                p.requires_grad = True
                p.grad = None
            logits = T.linear(Tensor(Z[rows]), params["w"], params["b"])
            T.bce_with_logits(logits, Y[rows], reduction="mean").backward()
            optimizer_step(params, {k: p.grad for k, p in params.items()}, opt, lr_at(opt.step, sched),
                           decay_mask=decay)
        s = Z[va] @ params["w"].data + params["b"].data
        auc = macro_auc(s[:, valid_classes], Y[va][:, valid_classes])
        history.append(auc)
        if best is None or auc > best[0]:
            best = (auc, epoch, params["w"].data.copy(), params["b"].data.copy())
    auc, epoch, w, b = best
    return ProbeHead(w, b, mean, scale, epoch, auc, history)


def probe_scores(head: ProbeHead, features) -> np.ndarray:
    return head.scores(features)
