"""Spatio-temporal transformer backbone and the light decoder used for reconstruction.

Parameters live in flat ``name -> Tensor`` dictionaries so that checkpoints,
optimizers and layer-wise learning rates can address them by name.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericDivergenceError
from .rng import substream, truncated_normal
from .tensor import Tensor

N_TEMPORAL = 11
N_SPATIAL = 13


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    hidden: int = 768
    heads: int = 8
    mlp: int = 1024
    patch_width: int = 96
    max_len: int = 256
    conv_channels: tuple = (16, 32)
    conv_kernels: tuple = (7, 5)
    conv_strides: tuple = (2, 2)
    mask_padding: bool = False
    ln_eps: float = 1e-5
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if min(self.depth, 0) < 0 or self.hidden <= 0 or self.mlp <= 0:
            raise ConfigError("depth must be >= 0 and widths positive")
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ConfigError("conv stack lists must have equal lengths")
        if self.conv_output_length() < 1:
            raise ConfigError(f"patch width {self.patch_width} too short for the conv stack")

    @property
    def d_head(self) -> int:
        return self.hidden // self.heads

    def conv_output_length(self) -> int:
        length = self.patch_width
        for k, s in zip(self.conv_kernels, self.conv_strides):
            length = (length - k) // s + 1
        return length


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 2
    hidden: int = 768
    heads: int = 2
    mlp: int = 2048
    in_dim: int = 128
    out_dim: int = 96
    ln_eps: float = 1e-5
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")


class ParamState:
    """Named parameters plus the config that shaped them."""

    def __init__(self, config, params: dict):
        self.config = config
        self.params = params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def parameters(self) -> dict:
        return self.params

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        missing = set(self.params) - set(arrays)
        if missing:
            raise DataError(f"missing parameters {sorted(missing)[:5]}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise DataError(f"parameter {k}: shape {a.shape} != {p.shape}")
            p.data = a.astype(p.dtype)

    def astype(self, dtype):
        cfg = dataclasses.replace(self.config, dtype=np.dtype(dtype).name)
        return type(self)(cfg, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                for k, v in self.params.items()})

    def copy(self):
        return type(self)(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                        for k, v in self.params.items()})

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def block_index(self, name: str) -> int:
        """Layer-decay group: 0 for embeddings/tokenizer, i+1 for block i, depth+1 for heads."""
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        if name.startswith(("tok.", "te", "se", "pe", "cls", "mask_token")):
            return 0
        return self.config.depth + 1


class EncoderState(ParamState):
    pass


class DecoderState(ParamState):
    pass


def _param(rng, shape, std, dtype):
    return Tensor(truncated_normal(rng, shape, std, dtype=dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _block_params(prefix, hidden, mlp, rng, std, dtype):
    p = {}
    p[f"{prefix}.ln1.g"] = _ones(hidden, dtype)
    p[f"{prefix}.ln1.b"] = _zeros(hidden, dtype)
    for m in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.w{m}"] = _param(rng, (hidden, hidden), std, dtype)
        p[f"{prefix}.attn.b{m}"] = _zeros(hidden, dtype)
    p[f"{prefix}.ln2.g"] = _ones(hidden, dtype)
    p[f"{prefix}.ln2.b"] = _zeros(hidden, dtype)
    p[f"{prefix}.mlp.w1"] = _param(rng, (hidden, mlp), std, dtype)
    p[f"{prefix}.mlp.b1"] = _zeros(mlp, dtype)
    p[f"{prefix}.mlp.w2"] = _param(rng, (mlp, hidden), std, dtype)
    p[f"{prefix}.mlp.b2"] = _zeros(hidden, dtype)
    return p


def init_encoder(config: EncoderConfig, seed: int = 0, stream: str = "init.encoder") -> EncoderState:
    rng = substream(seed, stream)
    dt = np.dtype(config.dtype)
    std = config.init_std
    D = config.hidden
    p = {}
    cin = 1
    for i, (c, k) in enumerate(zip(config.conv_channels, config.conv_kernels)):
        # fan-in scaling keeps patch content above the 0.02-scale context embeddings
        p[f"tok.conv{i}.w"] = _param(rng, (k, cin, c), math.sqrt(2.0 / (k * cin)), dt)
        p[f"tok.conv{i}.b"] = _zeros(c, dt)
        cin = c
    fan = config.conv_output_length() * cin
    p["tok.proj.w"] = _param(rng, (fan, D), 1.0 / math.sqrt(fan), dt)
    p["tok.proj.b"] = _zeros(D, dt)
    p["te"] = _param(rng, (N_TEMPORAL, D), std, dt)
    p["se"] = _param(rng, (N_SPATIAL, D), std, dt)
    p["pe"] = _param(rng, (config.max_len + 1, D), std, dt)
    p["cls"] = _param(rng, (D,), std, dt)
    p["mask_token"] = _param(rng, (config.patch_width,), std, dt)
    for b in range(config.depth):
        p.update(_block_params(f"blocks.{b}", D, config.mlp, rng, std, dt))
    p["norm.g"] = _ones(D, dt)
    p["norm.b"] = _zeros(D, dt)
    return EncoderState(config, p)


def init_decoder(config: DecoderConfig, seed: int = 0, stream: str = "init.decoder") -> DecoderState:
    rng = substream(seed, stream)
    dt = np.dtype(config.dtype)
    std = config.init_std
    D = config.hidden
    p = {"in.w": _param(rng, (config.in_dim, D), std, dt), "in.b": _zeros(D, dt)}
    for b in range(config.depth):
        p.update(_block_params(f"blocks.{b}", D, config.mlp, rng, std, dt))
    p["norm.g"] = _ones(D, dt)
    p["norm.b"] = _zeros(D, dt)
    p["head.w"] = _param(rng, (D, config.out_dim), std, dt)
    p["head.b"] = _zeros(config.out_dim, dt)
    return DecoderState(config, p)


# -- forward pieces -------------------------------------------------------------------

def _batched(a, ndim):
    a = np.asarray(a)
    return (a[None], True) if a.ndim == ndim - 1 else (a, False)


def _as_words(words, dtype):
    if isinstance(words, Tensor):
        return words if words.ndim == 3 else T.reshape(words, (1,) + words.shape)
    w, _ = _batched(words, 3)
    return Tensor(np.asarray(w, dtype=dtype))


def embed_tokens(words, state: EncoderState) -> Tensor:
    """Patch tokens via the shared conv stack, class token prepended: (B, l+1, D).

    ``words`` is an (l, t) or (B, l, t) array, or a Tensor when gradients must
    reach the patches (mask-token substitution).
    """
    cfg = state.config
    x = _as_words(words, state["cls"].dtype)
    if x.shape[-1] != cfg.patch_width:
        raise ConfigError(f"patch width {x.shape[-1]} != configured {cfg.patch_width}")
    B, L, t = x.shape
    h = T.reshape(x, (B * L, t, 1))
    for i, s in enumerate(cfg.conv_strides):
        h = T.gelu(T.conv1d(h, state[f"tok.conv{i}.w"], state[f"tok.conv{i}.b"], stride=s))
    h = T.reshape(h, (B, L, -1))
    tokens = T.linear(h, state["tok.proj.w"], state["tok.proj.b"])
    cls = T.reshape(state["cls"], (1, 1, cfg.hidden))
    cls = T.add(cls, Tensor(np.zeros((B, 1, cfg.hidden), dtype=tokens.dtype)))
    return T.concat([cls, tokens], axis=1)


def _check_ids(ids, upper, what):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= upper):
        raise DataError(f"{what} ids must lie in [0, {upper - 1}]")
    return ids


def add_context(tokens: Tensor, spatial_ids, temporal_ids, state: EncoderState) -> Tensor:
    """x' = tokens + TE[temporal] + SE[spatial] + PE; the class slot only receives PE[0]."""
    B, L1, D = tokens.shape
    spatial, _ = _batched(_check_ids(spatial_ids, N_SPATIAL, "spatial"), 2)
    temporal, _ = _batched(_check_ids(temporal_ids, N_TEMPORAL, "temporal"), 2)
    if spatial.shape != (B, L1 - 1) or temporal.shape != (B, L1 - 1):
        raise DataError(f"id arrays {spatial.shape}/{temporal.shape} do not match {B} x {L1 - 1} slots")
    if L1 > state["pe"].shape[0]:
        raise ConfigError(f"sentence length {L1 - 1} exceeds max_len {state['pe'].shape[0] - 1}")
    ctx = T.add(T.take_rows(state["te"], temporal), T.take_rows(state["se"], spatial))
    ctx = T.concat([Tensor(np.zeros((B, 1, D), dtype=tokens.dtype)), ctx], axis=1)
    pe = state["pe"] if L1 == state["pe"].shape[0] else T.getitem(state["pe"], slice(0, L1))
    return T.add(T.add(tokens, ctx), pe)


def _attention(h, state, prefix, heads, key_mask, keep):
    B, L, D = h.shape
    dh = D // heads

    def split(x):
        return T.transpose(T.reshape(x, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(T.linear(h, state[f"{prefix}.attn.wq"], state[f"{prefix}.attn.bq"]))
    k = split(T.linear(h, state[f"{prefix}.attn.wk"], state[f"{prefix}.attn.bk"]))
    v = split(T.linear(h, state[f"{prefix}.attn.wv"], state[f"{prefix}.attn.bv"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask[:, None, None, :], -1e9, 0.0).astype(scores.dtype)
        scores = T.add(scores, bias)
    att = T.softmax(scores, axis=-1)
    if keep is not None:
        keep.append(att.data)
    out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, D))
    return T.linear(out, state[f"{prefix}.attn.wo"], state[f"{prefix}.attn.bo"])


def run_blocks(x: Tensor, state: ParamState, depth: int, heads: int, eps: float,
               key_mask=None, keep_attention=None) -> Tensor:
    """Pre-LN blocks: x <- x + MHA(LN(x)); x <- x + FFN(LN(x)); then the final LN."""
    for b in range(depth):
        p = f"blocks.{b}"
        h = T.layer_norm(x, state[f"{p}.ln1.g"], state[f"{p}.ln1.b"], eps)
        x = T.add(x, _attention(h, state, p, heads, key_mask, keep_attention))
        h = T.layer_norm(x, state[f"{p}.ln2.g"], state[f"{p}.ln2.b"], eps)
        h = T.gelu(T.linear(h, state[f"{p}.mlp.w1"], state[f"{p}.mlp.b1"]))
        x = T.add(x, T.linear(h, state[f"{p}.mlp.w2"], state[f"{p}.mlp.b2"]))
        if not np.isfinite(x.data).all():
            raise NumericDivergenceError(f"non-finite activations after block {b}", block=b)
    return T.layer_norm(x, state["norm.g"], state["norm.b"], eps)


def encode(x: Tensor, state: EncoderState, pad_mask=None, return_attention=False):
    """Transformer encoder over (B, l+1, D); ``pad_mask`` (B, l) only matters in strict-masking mode."""
    cfg = state.config
    key_mask = None
    if cfg.mask_padding and pad_mask is not None:
        pm, _ = _batched(np.asarray(pad_mask, dtype=bool), 2)
        key_mask = np.concatenate([np.zeros((pm.shape[0], 1), dtype=bool), pm], axis=1)
    keep = [] if return_attention else None
    out = run_blocks(x, state, cfg.depth, cfg.heads, cfg.ln_eps, key_mask, keep)
    return (out, keep) if return_attention else out


def substitute_mask_token(words, mask, state: EncoderState) -> Tensor:
    """Replace masked patches by the learnable mask token, in patch space."""
    dt = state["mask_token"].dtype
    w, _ = _batched(np.asarray(words, dtype=dt), 3)
    m, _ = _batched(np.asarray(mask, dtype=dt), 2)
    m = m[..., None]
    kept = Tensor(w * (1.0 - m))
    return T.add(kept, T.mul(Tensor(m), T.reshape(state["mask_token"], (1, 1, -1))))


def encoder_forward(words, spatial_ids, temporal_ids, state: EncoderState, pad_mask=None,
                    mask=None) -> Tensor:
    """embed -> context -> encode; ``mask`` (B, l) swaps masked patches for the mask token."""
    if mask is not None:
        words = substitute_mask_token(words, mask, state)
    tokens = embed_tokens(words, state)
    x = add_context(tokens, spatial_ids, temporal_ids, state)
    return encode(x, state, pad_mask)


def forward_features(words, spatial_ids, temporal_ids, state: EncoderState, pad_mask=None,
                     pooling: str = "cls") -> np.ndarray:
    """Representation used by probes: the class-token row (or mean of word slots)."""
    h = encoder_forward(words, spatial_ids, temporal_ids, state, pad_mask).data
    if pooling == "cls":
        out = h[:, 0]
    elif pooling == "mean":
        out = h[:, 1:].mean(axis=1)
    else:
        raise ConfigError(f"unknown pooling {pooling!r}")
    return out[0] if np.asarray(words).ndim == 2 else out


def decode(quantized, state: DecoderState) -> Tensor:
    """(B, l, d) unit-norm code vectors -> (B, l, t) reconstruction."""
    cfg = state.config
    q = quantized if isinstance(quantized, Tensor) else Tensor(_batched(np.asarray(quantized, dtype=state["in.w"].dtype), 3)[0])
    if q.ndim == 2:
        q = T.reshape(q, (1,) + q.shape)
    if q.shape[-1] != cfg.in_dim:
        raise ConfigError(f"decoder expects {cfg.in_dim}-d inputs, got {q.shape[-1]}")
    x = T.linear(q, state["in.w"], state["in.b"])
    x = run_blocks(x, state, cfg.depth, cfg.heads, cfg.ln_eps)
    return T.linear(x, state["head.w"], state["head.b"])
