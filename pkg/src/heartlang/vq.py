"""Cosine-similarity vector quantisation with an EMA-maintained codebook."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError
from .rng import substream, truncated_normal
from .st_ecgformer import ParamState
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VQConfig:
    k: int = 8192
    d: int = 128
    decay: float = 0.99
    eps: float = 1e-5
    reseed_dead: bool = False
    dead_threshold: float = 1e-3

    def __post_init__(self):
        if self.k < 1 or self.d < 1:
            raise ConfigError("codebook needs k >= 1 and d >= 1")
        if not 0 <= self.decay < 1:
            raise ConfigError("EMA decay must lie in [0, 1)")


@dataclass
class Vocabulary:
    codewords: np.ndarray   # (k, d), unit rows
    ema_counts: np.ndarray  # (k,)
    ema_sums: np.ndarray    # (k, d)
    usage: np.ndarray       # (k,) int64 assignment counters
    decay: float = 0.99
    eps: float = 1e-5

    @property
    def k(self) -> int:
        return self.codewords.shape[0]

    @property
    def d(self) -> int:
        return self.codewords.shape[1]


@dataclass
class QuantizeResult:
    indices: np.ndarray          # (..., ) int64
    quantized: np.ndarray        # (..., d) unit-norm codewords
    commit_distances: np.ndarray  # (...,) ||l2(p) - l2(v_z)||


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def init_vocabulary(k: int, d: int, seed: int = 0, decay: float = 0.99, eps: float = 1e-5) -> Vocabulary:
    """Random unit codewords; EMA statistics start empty."""
    rng = substream(seed, "init.codebook")
    cw = _normalize_rows(rng.standard_normal((k, d)))
    return Vocabulary(cw, np.zeros(k), np.zeros((k, d)), np.zeros(k, dtype=np.int64), decay, eps)


def quantize(p, vocab: Vocabulary) -> QuantizeResult:
    """Nearest codeword by cosine similarity; ties go to the lowest index."""
    p = np.asarray(p, dtype=np.float64)
    if vocab.k < 1:
        raise ConfigError("empty vocabulary")
    flat = p.reshape(-1, vocab.d)
    pn = _normalize_rows(flat)
    zero = ~pn.any(axis=1)
    if zero.any():
        log.warning("%d zero vectors quantized by tie-break", int(zero.sum()))
    sims = pn @ vocab.codewords.T
    idx = np.argmax(sims, axis=1)
    q = vocab.codewords[idx]
    dist = np.sqrt(((pn - q) ** 2).sum(axis=1))
    lead = p.shape[:-1]
    return QuantizeResult(idx.reshape(lead), q.reshape(lead + (vocab.d,)), dist.reshape(lead))


def ema_update(vocab: Vocabulary, p_batch, assignments) -> Vocabulary:
    """Decay cluster sizes and sums toward this batch, then renormalise the codewords."""
    pn = _normalize_rows(np.asarray(p_batch, dtype=np.float64).reshape(-1, vocab.d))
    idx = np.ascontiguousarray(np.asarray(assignments, dtype=np.int64).reshape(-1))
    sums, counts = kernels.segment_sum(np.ascontiguousarray(pn), idx, vocab.k)
    g = vocab.decay
    ema_counts = g * vocab.ema_counts + (1.0 - g) * counts
    ema_sums = g * vocab.ema_sums + (1.0 - g) * sums
    centre = ema_sums / np.maximum(ema_counts, vocab.eps)[:, None]
    norm = np.sqrt((centre * centre).sum(axis=1))
    live = norm > 0
    cw = vocab.codewords.copy()
    cw[live] = centre[live] / norm[live, None]
    usage = vocab.usage + counts.astype(np.int64)
    return dataclasses.replace(vocab, codewords=cw, ema_counts=ema_counts, ema_sums=ema_sums, usage=usage)


def reseed_dead_codes(vocab: Vocabulary, p_batch, rng: np.random.Generator, threshold: float) -> Vocabulary:
    """Point codewords whose EMA cluster size fell below ``threshold`` at random batch vectors."""
    dead = np.flatnonzero(vocab.ema_counts < threshold)
    pn = _normalize_rows(np.asarray(p_batch, dtype=np.float64).reshape(-1, vocab.d))
    if dead.size == 0 or len(pn) == 0:
        return vocab
    pick = rng.integers(0, len(pn), size=dead.size)
    cw = vocab.codewords.copy()
    cw[dead] = pn[pick]
    sums = vocab.ema_sums.copy()
    sums[dead] = 0.0
    return dataclasses.replace(vocab, codewords=cw, ema_sums=sums)


def usage_report(vocab: Vocabulary | None, corpus_assignments) -> dict:
    """Effective vocabulary size, histogram and perplexity of a corpus of assignments."""
    idx = np.asarray(corpus_assignments, dtype=np.int64).reshape(-1)
    k = vocab.k if vocab is not None else int(idx.max()) + 1 if idx.size else 0
    hist = np.bincount(idx, minlength=k) if idx.size else np.zeros(k, dtype=np.int64)
    total = hist.sum()
    if total == 0:
        return {"effective_size": 0, "histogram": hist, "perplexity": 0.0, "k": k, "n_assignments": 0}
    prob = hist[hist > 0] / total
    entropy = float(-(prob * np.log(prob)).sum())
    return {"effective_size": int((hist > 0).sum()), "histogram": hist,
            "perplexity": math.exp(entropy), "k": k, "n_assignments": int(total)}


# -- projection head and loss -------------------------------------------------------

class ProjectionHead(ParamState):
    def astype(self, dtype):
        return ProjectionHead(dict(self.config), {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                                  for k, v in self.params.items()})


def init_projection(in_dim: int, out_dim: int, seed: int = 0, std: float = 0.02,
                    dtype="float32", stream: str = "init.projection") -> ProjectionHead:
    rng = substream(seed, stream)
    w = Tensor(truncated_normal(rng, (in_dim, out_dim), std, dtype=np.dtype(dtype)), requires_grad=True)
    b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
    return ProjectionHead({"in_dim": in_dim, "out_dim": out_dim}, {"w": w, "b": b})


def project(hidden, head: ProjectionHead) -> Tensor:
    """Per-slot linear map from encoder width to codeword width."""
    h = hidden if isinstance(hidden, Tensor) else Tensor(np.asarray(hidden, dtype=head["w"].dtype))
    return T.linear(h, head["w"], head["b"])


def vq_loss(x_hat: Tensor, x, p_normed: Tensor, quantized, reduction: str = "sum"):
    """Reconstruction + codebook + commitment terms.

    ``quantized`` is a constant (the codebook is EMA-maintained), so the
    codebook term carries no parameter gradient; it is still reported.
    Returns ``(loss, terms)`` where ``terms`` holds the three float values.
    """
    x = np.asarray(x, dtype=x_hat.dtype)
    v = np.asarray(quantized, dtype=p_normed.dtype)
    rec = T.sum_(T.square(T.sub(x_hat, x)))
    codebook = T.sum_(T.square(T.sub(T.detach(p_normed), v)))
    commit = T.sum_(T.square(T.sub(p_normed, T.detach(Tensor(v)))))
    loss = T.add(T.add(rec, codebook), commit)
    n_slots = int(np.prod(p_normed.shape[:-1]))
    if reduction == "mean":
        loss = T.mul(loss, 1.0 / n_slots)
    terms = {"reconstruction": float(rec.data), "codebook": float(codebook.data),
             "commitment": float(commit.data), "n_slots": n_slots, "n_values": int(x.size)}
    return loss, terms


def straight_through(p_normed: Tensor, quantized) -> Tensor:
    """Forward value of the codewords, gradient of the identity back to ``p_normed``."""
    v = Tensor(np.asarray(quantized, dtype=p_normed.dtype))
    return T.add(p_normed, T.detach(T.sub(v, p_normed)))
