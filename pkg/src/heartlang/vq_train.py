"""Vector-quantised heartbeat reconstruction: the model bundle, its step and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericDivergenceError
from .rng import substream
from .st_ecgformer import (DecoderConfig, DecoderState, EncoderConfig, EncoderState, decode,
                           encoder_forward, init_decoder, init_encoder)
from .storage import SentenceCorpus
from .training import EpochLog, OptimConfig, Stepper, batches
from .vq import (ProjectionHead, VQConfig, Vocabulary, ema_update, init_projection, init_vocabulary,
                 project, quantize, reseed_dead_codes, straight_through, usage_report, vq_loss)

log = logging.getLogger(__name__)


@dataclass
class VQModel:
    encoder: EncoderState
    head: ProjectionHead
    decoder: DecoderState
    vocab: Vocabulary
    config: VQConfig = field(default_factory=VQConfig)

    def parameters(self) -> dict:
        out = {}
        for prefix, part in (("encoder", self.encoder), ("head", self.head), ("decoder", self.decoder)):
            out.update({f"{prefix}.{k}": v for k, v in part.params.items()})
        return out

    def arrays(self) -> dict:
        out = {k: v.data for k, v in self.parameters().items()}
        out["vocab.codewords"] = self.vocab.codewords
        out["vocab.ema_counts"] = self.vocab.ema_counts
        out["vocab.ema_sums"] = self.vocab.ema_sums
        out["vocab.usage"] = self.vocab.usage.astype(np.float64)
        return out

    def load_arrays(self, arrays: dict):
        for prefix, part in (("encoder", self.encoder), ("head", self.head), ("decoder", self.decoder)):
            n = len(prefix) + 1
            part.load_arrays({k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")})
        self.vocab.codewords = np.asarray(arrays["vocab.codewords"], dtype=np.float64)
        self.vocab.ema_counts = np.asarray(arrays["vocab.ema_counts"], dtype=np.float64)
        self.vocab.ema_sums = np.asarray(arrays["vocab.ema_sums"], dtype=np.float64)
        self.vocab.usage = np.rint(arrays["vocab.usage"]).astype(np.int64)

    def astype(self, dtype) -> "VQModel":
        return VQModel(self.encoder.astype(dtype), self.head.astype(dtype), self.decoder.astype(dtype),
                       self.vocab, self.config)


def init_vq_model(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, vq_cfg: VQConfig,
                  seed: int = 0) -> VQModel:
    enc = init_encoder(encoder_cfg, seed, "init.vq.encoder")
    head = init_projection(encoder_cfg.hidden, vq_cfg.d, seed, encoder_cfg.init_std, encoder_cfg.dtype)
    dec = init_decoder(decoder_cfg, seed, "init.vq.decoder")
    vocab = init_vocabulary(vq_cfg.k, vq_cfg.d, seed, vq_cfg.decay, vq_cfg.eps)
    return VQModel(enc, head, dec, vocab, vq_cfg)


@dataclass
class VQForward:
    loss: T.Tensor
    terms: dict
    indices: np.ndarray     # (B, l)
    p_normed: np.ndarray    # (B, l, d)
    x_hat: np.ndarray


def vq_forward(model: VQModel, words, spatial_ids, temporal_ids, pad_mask=None,
               reduction: str = "mean") -> VQForward:
    """encode -> project -> normalise -> quantise -> straight-through -> decode -> loss."""
    h = encoder_forward(words, spatial_ids, temporal_ids, model.encoder, pad_mask)
    h = T.getitem(h, (slice(None), slice(1, None)))
    pn = T.l2_normalize(project(h, model.head))
    idx = T.constant(quantize(pn.data, model.vocab).indices)
    v = model.vocab.codewords[idx]
    x_hat = decode(straight_through(pn, v), model.decoder)
    w = np.asarray(words)
    if w.ndim == 2:
        w = w[None]
    loss, terms = vq_loss(x_hat, w, pn, v, reduction=reduction)
    return VQForward(loss, terms, idx, pn.data, x_hat.data)


def assign_indices(model: VQModel, corpus: SentenceCorpus, batch_size: int = 64) -> np.ndarray:
    """Frozen quantiser pass over a corpus: (n, l) codeword indices."""
    out = np.empty(corpus.pad_mask.shape, dtype=np.int64)
    for b in batches(len(corpus), batch_size):
        h = encoder_forward(corpus.words[b], corpus.spatial_ids[b], corpus.temporal_ids[b],
                            model.encoder, corpus.pad_mask[b])
        p = project(T.Tensor(h.data[:, 1:]), model.head).data
        out[b] = quantize(p, model.vocab).indices
    return out


def evaluate_vq(model: VQModel, corpus: SentenceCorpus, batch_size: int = 64) -> dict:
    """Reconstruction MSE and loss per slot without touching the codebook."""
    sq, n_values, loss, n_slots = 0.0, 0, 0.0, 0
    assigned = []
    for b in batches(len(corpus), batch_size):
        f = vq_forward(model, corpus.words[b], corpus.spatial_ids[b], corpus.temporal_ids[b],
                       corpus.pad_mask[b], reduction="sum")
        sq += f.terms["reconstruction"]
        n_values += f.terms["n_values"]
        loss += float(f.loss.data)
        n_slots += f.terms["n_slots"]
        assigned.append(f.indices.reshape(-1))
    usage = usage_report(model.vocab, np.concatenate(assigned))
    return {"reconstruction_mse": sq / n_values, "loss_per_slot": loss / n_slots,
            "effective_size": usage["effective_size"], "perplexity": usage["perplexity"]}


def train_vq(model: VQModel, train: SentenceCorpus, valid: SentenceCorpus | None, optim: OptimConfig,
             seed: int = 0, log_path=None, on_epoch=None) -> EpochLog:
    """Joint reconstruction training; the codebook moves only by EMA."""
    params = model.parameters()
    stepper = Stepper(params, optim, len(train))
    order_rng = substream(seed, "data.vq")
    reseed_rng = substream(seed, "vq.reseed")
    history = EpochLog(log_path)
    for epoch in range(1, optim.epochs + 1):
        t0 = time.perf_counter()
        sums = {"reconstruction": 0.0, "codebook": 0.0, "commitment": 0.0}
        n_values = n_slots = 0
        assigned = []
        for b in batches(len(train), optim.batch_size, order_rng):
            f = vq_forward(model, train.words[b], train.spatial_ids[b], train.temporal_ids[b],
                           train.pad_mask[b], reduction="mean")
            if not np.isfinite(f.loss.data):
                raise NumericDivergenceError(f"non-finite VQ loss at epoch {epoch}")
            f.loss.backward()
            stepper.step()
            model.vocab = ema_update(model.vocab, f.p_normed, f.indices)
            if model.config.reseed_dead:
                model.vocab = reseed_dead_codes(model.vocab, f.p_normed, reseed_rng, model.config.dead_threshold)
            for k in sums:
                sums[k] += f.terms[k]
            n_values += f.terms["n_values"]
            n_slots += f.terms["n_slots"]
            assigned.append(f.indices.reshape(-1))
        usage = usage_report(model.vocab, np.concatenate(assigned))
        row = {"epoch": epoch, "lr": stepper.last_lr,
               "train_reconstruction_mse": sums["reconstruction"] / n_values,
               "train_codebook": sums["codebook"] / n_slots,
               "train_commitment": sums["commitment"] / n_slots,
               "train_effective_size": usage["effective_size"],
               "train_perplexity": usage["perplexity"]}
        if valid is not None and len(valid):
            ev = evaluate_vq(model, valid)
            row.update({"valid_reconstruction_mse": ev["reconstruction_mse"],
                        "valid_loss_per_slot": ev["loss_per_slot"],
                        "valid_effective_size": ev["effective_size"]})
        row["wall_s"] = time.perf_counter() - t0
        history.append(row)
        log.info("vq epoch %d: %s", epoch, {k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})
        if on_epoch is not None:
            on_epoch(epoch, model)
    return history
