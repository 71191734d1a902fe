"""Masked sentence pre-training: mask sampling, patch-space substitution and index prediction."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericDivergenceError
from .rng import substream, truncated_normal
from .st_ecgformer import EncoderConfig, EncoderState, ParamState, encoder_forward, init_encoder
from .storage import SentenceCorpus, read_targets, write_targets
from .tensor import Tensor
from .tokenizer import EcgSentence
from .training import EpochLog, OptimConfig, Stepper, batches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPlan:
    mask: np.ndarray   # (l,) bool
    ratio: float
    seed: int | None = None

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def mask_count(n_real: int, ratio: float) -> int:
    """round(ratio * n_real), half rounded up; a single real slot is always masked."""
    if n_real < 2:
        return 1
    return int(math.floor(ratio * n_real + 0.5))


def sample_mask(pad_mask, ratio: float, rng, seed: int | None = None) -> MaskPlan:
    """Uniform subset of the non-pad slots; ``rng`` is a Generator or an integer seed."""
    if not 0 <= ratio <= 1:
        raise ConfigError("mask ratio must lie in [0, 1]")
    pad = np.asarray(pad_mask, dtype=bool)
    real = np.flatnonzero(~pad)
    if real.size == 0:
        raise DataError("cannot mask an all-pad sentence")
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    chosen = rng.choice(real, size=mask_count(real.size, ratio), replace=False)
    mask = np.zeros(pad.shape, dtype=bool)
    mask[chosen] = True
    return MaskPlan(mask, ratio, seed)


def sample_batch_masks(pad_mask, ratio: float, rng) -> np.ndarray:
    return np.stack([sample_mask(row, ratio, rng).mask for row in np.asarray(pad_mask, dtype=bool)])


def apply_mask(sentence: EcgSentence, plan: MaskPlan, mask_token) -> EcgSentence:
    """Masked patches become the mask-token vector; ids and padding stay as they are."""
    mask = np.asarray(plan.mask, dtype=bool)
    if mask.shape != sentence.pad_mask.shape:
        raise DataError("mask plan length differs from the sentence")
    if (mask & sentence.pad_mask).any():
        raise DataError("mask plan covers pad slots")
    token = np.asarray(mask_token.data if isinstance(mask_token, Tensor) else mask_token,
                       dtype=sentence.words.dtype)
    words = sentence.words.copy()
    words[mask] = token
    return dataclasses.replace(sentence, words=words)


def unmask(masked: EcgSentence, original_patches: np.ndarray, plan: MaskPlan) -> EcgSentence:
    words = masked.words.copy()
    words[plan.mask] = original_patches
    return dataclasses.replace(masked, words=words)


# -- classifier and loss ------------------------------------------------------------

class IndexClassifier(ParamState):
    def astype(self, dtype):
        return IndexClassifier(dict(self.config), {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                                   for k, v in self.params.items()})


def init_classifier(hidden: int, k: int, seed: int = 0, std: float = 0.02, dtype="float32") -> IndexClassifier:
    rng = substream(seed, "init.index_classifier")
    w = Tensor(truncated_normal(rng, (hidden, k), std, dtype=np.dtype(dtype)), requires_grad=True)
    b = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
    return IndexClassifier({"hidden": hidden, "k": k}, {"w": w, "b": b})


def predict_indices(hidden, classifier: IndexClassifier) -> Tensor:
    """Logits over the k codewords for each masked-slot hidden row."""
    h = hidden if isinstance(hidden, Tensor) else Tensor(np.asarray(hidden, dtype=classifier["w"].dtype))
    return T.linear(h, classifier["w"], classifier["b"])


def pretrain_loss(logits: Tensor, targets, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of the target indices, summed over masked slots."""
    targets = np.asarray(targets, dtype=np.int64)
    k = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise DataError(f"target indices must lie in [0, {k})")
    return T.cross_entropy(logits, targets, reduction=reduction)


def masked_accuracy(logits, targets) -> float:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    t = np.asarray(targets).reshape(-1)
    if t.size == 0:
        return 0.0
    return float((z.reshape(-1, z.shape[-1]).argmax(axis=1) == t).mean())


# -- model bundle -----------------------------------------------------------------

@dataclass
class PretrainModel:
    encoder: EncoderState
    classifier: IndexClassifier

    def parameters(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"classifier.{k}": v for k, v in self.classifier.params.items()})
        return out

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict):
        self.encoder.load_arrays({k[8:]: v for k, v in arrays.items() if k.startswith("encoder.")})
        self.classifier.load_arrays({k[11:]: v for k, v in arrays.items() if k.startswith("classifier.")})

    def astype(self, dtype) -> "PretrainModel":
        return PretrainModel(self.encoder.astype(dtype), self.classifier.astype(dtype))


def init_pretrain_model(encoder_cfg: EncoderConfig, k: int, seed: int = 0) -> PretrainModel:
    return PretrainModel(init_encoder(encoder_cfg, seed, "init.pretrain.encoder"),
                         init_classifier(encoder_cfg.hidden, k, seed, encoder_cfg.init_std, encoder_cfg.dtype))


def masked_forward(model: PretrainModel, words, spatial_ids, temporal_ids, pad_mask, mask, targets,
                   reduction: str = "sum"):
    """Loss and logits over the masked slots of a batch; ``targets`` is (B, l)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None]
    h = encoder_forward(words, spatial_ids, temporal_ids, model.encoder, pad_mask, mask=mask)
    b_idx, s_idx = np.nonzero(mask)
    rows = T.getitem(h, (b_idx, s_idx + 1))
    logits = predict_indices(rows, model.classifier)
    tgt = T.constant(np.asarray(targets).reshape(mask.shape)[b_idx, s_idx])
    return pretrain_loss(logits, tgt, reduction), logits, tgt


# -- cached targets ---------------------------------------------------------------------

def cached_targets(path, vq_hash: str, corpus_digest: str, compute):
    """Load targets keyed by (VQ checkpoint, corpus); recompute and rewrite when stale."""
    path = Path(path)
    if path.exists() and Path(str(path) + ".json").exists():
        targets, manifest = read_targets(path)
        if manifest.get("vq_checkpoint") == vq_hash and manifest.get("corpus") == corpus_digest:
            return targets, True
        log.info("target cache %s is stale; recomputing", path)
    targets = np.asarray(compute(), dtype=np.int64)
    write_targets(path, targets, {"vq_checkpoint": vq_hash, "corpus": corpus_digest})
    return targets, False


# -- training loop ----------------------------------------------------------------------

def evaluate_masked(model: PretrainModel, corpus: SentenceCorpus, targets: np.ndarray, ratio: float,
                    seed: int = 0, batch_size: int = 64) -> dict:
    """Held-out masked accuracy under a fixed mask draw."""
    rng = substream(seed, "mask.eval")
    correct = total = 0
    loss = 0.0
    for b in batches(len(corpus), batch_size):
        mask = sample_batch_masks(corpus.pad_mask[b], ratio, rng)
        lval, logits, tgt = masked_forward(model, corpus.words[b], corpus.spatial_ids[b],
                                           corpus.temporal_ids[b], corpus.pad_mask[b], mask, targets[b])
        correct += int((logits.data.argmax(axis=1) == tgt).sum())
        total += tgt.size
        loss += float(lval.data)
    return {"accuracy": correct / max(total, 1), "loss_per_slot": loss / max(total, 1), "n_masked": total}


def train_pretrain(model: PretrainModel, train: SentenceCorpus, train_targets: np.ndarray,
                   optim: OptimConfig, mask_ratio: float = 0.5, seed: int = 0,
                   valid: SentenceCorpus | None = None, valid_targets: np.ndarray | None = None,
                   log_path=None, on_epoch=None, monitor: int = 256) -> EpochLog:
    """AdamW over encoder, embeddings, mask token and classifier; loss is the summed NLL
    divided by the batch's masked-slot count so the step size does not track sentence length.

    Besides the running minibatch accuracy, up to ``monitor`` training sentences are
    re-scored after every epoch under one fixed mask draw (``train_fixed_masked_accuracy``),
    which gives an accuracy curve free of mask-sampling noise. ``monitor=0`` turns it off.
    """
    if mask_count(int((~train.pad_mask).sum(axis=1).min()), mask_ratio) < 1:
        raise ConfigError("mask ratio leaves some sentence with no masked slot")
    stepper = Stepper(model.parameters(), optim, len(train))
    order_rng = substream(seed, "data.pretrain")
    mask_rng = substream(seed, "mask.train")
    history = EpochLog(log_path)
    watch = None
    if monitor > 0:
        pick = np.sort(substream(seed, "monitor.pretrain").permutation(len(train))[:monitor])
        watch = (train.subset(pick), train_targets[pick])
    for epoch in range(1, optim.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = total = 0
        for b in batches(len(train), optim.batch_size, order_rng):
            mask = sample_batch_masks(train.pad_mask[b], mask_ratio, mask_rng)
            lval, logits, tgt = masked_forward(model, train.words[b], train.spatial_ids[b],
                                               train.temporal_ids[b], train.pad_mask[b], mask, train_targets[b])
            n = tgt.size
            if not np.isfinite(lval.data):
                raise NumericDivergenceError(f"non-finite pre-training loss at epoch {epoch}")
            T.mul(lval, 1.0 / n).backward()
            stepper.step()
            loss_sum += float(lval.data)
            correct += int((logits.data.argmax(axis=1) == tgt).sum())
            total += n
        row = {"epoch": epoch, "lr": stepper.last_lr, "train_loss_per_slot": loss_sum / total,
               "train_masked_accuracy": correct / total}
        if watch is not None:
            row["train_fixed_masked_accuracy"] = evaluate_masked(model, *watch, mask_ratio, seed)["accuracy"]
        if valid is not None and valid_targets is not None and len(valid):
            ev = evaluate_masked(model, valid, valid_targets, mask_ratio, seed)
            row.update({"valid_loss_per_slot": ev["loss_per_slot"], "valid_masked_accuracy": ev["accuracy"]})
        row["wall_s"] = time.perf_counter() - t0
        history.append(row)
        log.info("pretrain epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return history
