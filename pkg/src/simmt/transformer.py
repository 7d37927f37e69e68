"""Pre-norm Transformer encoder-decoder with tied target embeddings.

Parameters live in a flat ``dict[str, Tensor]`` so that checkpointing,
optimisation and gradient checks can iterate over them by name. Inputs are
batched ``[B, L]`` integer arrays; 1-D inputs are treated as ``B = 1``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, DimensionError
from .numerics import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are the Base configuration."""

    num_layers: int = 6
    model_dim: int = 512
    ff_dim: int = 2048
    num_heads: int = 8
    src_vocab_size: int = 10000
    tgt_vocab_size: int = 10000
    dropout: float = 0.1
    share_tgt_output_embeddings: bool = True
    # 0 = text-only NMT; otherwise the width of the region features fed to the CMI block
    region_dim: int = 0
    unidirectional_encoder: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "model_dim", "ff_dim", "num_heads",
                     "src_vocab_size", "tgt_vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.model_dim % 2:
            raise ConfigError("model_dim must be even for sinusoidal positions")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.region_dim < 0:
            raise ConfigError("region_dim must be >= 0")

    @property
    def multimodal(self) -> bool:
        return self.region_dim > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


@dataclass
class EncodedSource:
    states: Tensor          # [B, N, D]
    lengths: np.ndarray     # [B]
    cmi_attention: Optional[Tensor] = None  # [B, N, R] when multimodal


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _attn_params(prefix, d, rng, out):
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = _xavier(rng, d, d)


def _ln_params(prefix, d, out):
    out[f"{prefix}.g"] = np.ones(d)
    out[f"{prefix}.b"] = np.zeros(d)


def _ff_params(prefix, d, f, rng, out):
    out[f"{prefix}.w1"] = _xavier(rng, d, f)
    out[f"{prefix}.b1"] = np.zeros(f)
    out[f"{prefix}.w2"] = _xavier(rng, f, d)
    out[f"{prefix}.b2"] = np.zeros(d)


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = config.model_dim, config.ff_dim
    raw: dict[str, np.ndarray] = {
        "src_embed": rng.normal(0.0, d ** -0.5, size=(config.src_vocab_size, d)),
        "tgt_embed": rng.normal(0.0, d ** -0.5, size=(config.tgt_vocab_size, d)),
    }
    for layer in range(config.num_layers):
        p = f"enc.{layer}"
        _ln_params(f"{p}.ln1", d, raw)
        _attn_params(f"{p}.self", d, rng, raw)
        _ln_params(f"{p}.ln2", d, raw)
        _ff_params(f"{p}.ff", d, f, rng, raw)
    _ln_params("enc.ln", d, raw)
    for layer in range(config.num_layers):
        p = f"dec.{layer}"
        _ln_params(f"{p}.ln1", d, raw)
        _attn_params(f"{p}.self", d, rng, raw)
        _ln_params(f"{p}.ln2", d, raw)
        _attn_params(f"{p}.cross", d, rng, raw)
        _ln_params(f"{p}.ln3", d, raw)
        _ff_params(f"{p}.ff", d, f, rng, raw)
    _ln_params("dec.ln", d, raw)
    if not config.share_tgt_output_embeddings:
        raw["out.w"] = _xavier(rng, d, config.tgt_vocab_size)
    raw["out.b"] = np.zeros(config.tgt_vocab_size)
    if config.multimodal:
        raw["vis.proj.w"] = _xavier(rng, config.region_dim, d)
        raw["vis.proj.b"] = np.zeros(d)
        _attn_params("cmi", d, rng, raw)
        _ln_params("cmi.ln", d, raw)
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in raw.items()}


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else y + b


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, dropout: float = 0.0,
                         rng=None, training: bool = False):
    """softmax(q k^T / sqrt(d) | mask) v over the last two axes.

    Returns ``(output, weights)``; weights are kept for supervision and are
    the pre-dropout distribution.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise DimensionError(f"query dim {d} vs key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys vs {v.shape[-2]} values")
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    weights = nx.softmax(scores, axis=-1, mask=mask)
    return nx.matmul(nx.dropout(weights, dropout, rng, training), v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(x.reshape(b, n, heads, d // heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nx.transpose(x, (0, 2, 1, 3)).reshape(b, n, h * dh)


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, mask, params: dict,
                         prefix: str, heads: int, dropout: float = 0.0, rng=None,
                         training: bool = False):
    """Project, attend per head, concatenate, project with ``W_o``.

    ``q_in`` is ``[B, q, D]`` (or ``[q, D]``); ``mask`` broadcasts to
    ``[B, q, r]``. Each ``D x D`` projection holds the per-head
    ``D x D/n`` blocks side by side. Returns ``(output, weights[B, H, q, r])``.
    """
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in, k_in, v_in = (t.reshape(1, *t.shape) for t in (q_in, k_in, v_in))
    q = _split_heads(linear(q_in, params[f"{prefix}.wq"], params.get(f"{prefix}.bq")), heads)
    k = _split_heads(linear(k_in, params[f"{prefix}.wk"], params.get(f"{prefix}.bk")), heads)
    v = _split_heads(linear(v_in, params[f"{prefix}.wv"], params.get(f"{prefix}.bv")), heads)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask[:, None] if mask.ndim == 3 else mask
    ctx, weights = scaled_dot_attention(q, k, v, mask, dropout, rng, training)
    out = linear(_merge_heads(ctx), params[f"{prefix}.wo"], params.get(f"{prefix}.bo"))
    if squeeze:
        out = out.reshape(*out.shape[1:])
    return out, weights


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal table: ``pe[p, 2i] = sin(p / 10000^(2i/D))``, cos at ``2i+1``."""
    if length < 1 or dim < 1:
        raise ConfigError("positional_encoding needs length, dim >= 1")
    if dim % 2:
        raise ConfigError(f"positional encoding dimension must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe


def _feed_forward(x, params, prefix, dropout, rng, training):
    hidden = nx.relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    hidden = nx.dropout(hidden, dropout, rng, training)
    return linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(x, params, prefix):
    return nx.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _as_batch(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise DataError(f"expected [B, L] token ids, got shape {ids.shape}")
    return ids


def _embed(ids, table: Tensor, dim: int, dropout, rng, training) -> Tensor:
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise DataError(f"token id outside vocabulary of size {table.shape[0]}")
    x = nx.embedding(table, ids) * math.sqrt(dim) + positional_encoding(ids.shape[1], dim)
    return nx.dropout(x, dropout, rng, training)


def lengths_of(ids: np.ndarray) -> np.ndarray:
    """Non-pad length of each row, assuming right padding."""
    return (ids != PAD).sum(axis=1)


def unidirectional_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def encoder_self_mask(lengths: np.ndarray, n: int, unidirectional: bool) -> np.ndarray:
    keys = np.arange(n)[None, :] < np.asarray(lengths)[:, None]        # [B, N]
    mask = keys[:, None, :].repeat(n, axis=1)                           # [B, N, N]
    if unidirectional:
        mask = mask & unidirectional_mask(n)[None]
    return mask


# ---------------------------------------------------------------------------
# encoder / decoder


def encode(src_ids, self_mask, config: ModelConfig, params: dict, *,
           rng=None, training: bool = False) -> EncodedSource:
    """Run the encoder stack. ``self_mask`` is ``[N, N]`` or ``[B, N, N]``."""
    ids = _as_batch(src_ids)
    n = ids.shape[1]
    self_mask = np.asarray(self_mask, dtype=bool)
    if self_mask.shape[-2:] != (n, n):
        raise DimensionError(f"self mask {self_mask.shape} does not match source length {n}")
    if self_mask.ndim == 2:
        self_mask = self_mask[None]
    d, p = config.model_dim, config.dropout
    x = _embed(ids, params["src_embed"], d, p, rng, training)
    for layer in range(config.num_layers):
        pre = f"enc.{layer}"
        h = _ln(x, params, f"{pre}.ln1")
        a, _ = multi_head_attention(h, h, h, self_mask, params, f"{pre}.self",
                                    config.num_heads, p, rng, training)
        x = x + nx.dropout(a, p, rng, training)
        h = _ln(x, params, f"{pre}.ln2")
        x = x + nx.dropout(_feed_forward(h, params, f"{pre}.ff", p, rng, training), p, rng, training)
    x = _ln(x, params, "enc.ln")
    return EncodedSource(states=x, lengths=lengths_of(ids))


def decoder_forward(tgt_ids, encoded: EncodedSource, cross_mask, config: ModelConfig,
                    params: dict, *, rng=None, training: bool = False) -> Tensor:
    """Next-token logits ``[B, T, V]`` for BOS-prefixed decoder inputs.

    ``cross_mask[b, t, j]`` marks source position ``j`` readable at step ``t``.
    """
    ids = _as_batch(tgt_ids)
    b, t = ids.shape
    n = encoded.states.shape[1]
    cross_mask = np.asarray(cross_mask, dtype=bool)
    if cross_mask.ndim == 2:
        cross_mask = cross_mask[None]
    if cross_mask.shape[-2:] != (t, n):
        raise DimensionError(f"cross mask {cross_mask.shape} vs target {t} x source {n}")
    if not cross_mask.any(axis=-1).all():
        raise DimensionError("cross mask has a target step with no readable source position")
    d, p = config.model_dim, config.dropout
    # right padding: pad keys only ever reach pad queries, whose loss is ignored
    self_mask = unidirectional_mask(t)[None]
    x = _embed(ids, params["tgt_embed"], d, p, rng, training)
    mem = encoded.states
    for layer in range(config.num_layers):
        pre = f"dec.{layer}"
        h = _ln(x, params, f"{pre}.ln1")
        a, _ = multi_head_attention(h, h, h, self_mask, params, f"{pre}.self",
                                    config.num_heads, p, rng, training)
        x = x + nx.dropout(a, p, rng, training)
        h = _ln(x, params, f"{pre}.ln2")
        a, _ = multi_head_attention(h, mem, mem, cross_mask, params, f"{pre}.cross",
                                    config.num_heads, p, rng, training)
        x = x + nx.dropout(a, p, rng, training)
        h = _ln(x, params, f"{pre}.ln3")
        x = x + nx.dropout(_feed_forward(h, params, f"{pre}.ff", p, rng, training), p, rng, training)
    x = _ln(x, params, "dec.ln")
    if config.share_tgt_output_embeddings:
        w = nx.swapaxes(params["tgt_embed"], 0, 1)
    else:
        w = params["out.w"]
    return linear(x, w, params["out.b"])


class Transformer:
    """Parameter container with convenience wrappers around the functions above."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: Optional[dict[str, Tensor]] = None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else init_params(config, seed)

    @property
    def multimodal(self) -> bool:
        return self.config.multimodal

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def encode(self, src_ids, unidirectional: Optional[bool] = None, *, regions=None,
               region_mask=None, rng=None, training: bool = False) -> EncodedSource:
        """Encode a padded batch; applies the CMI block when the model is multimodal."""
        if unidirectional is None:
            unidirectional = self.config.unidirectional_encoder
        ids = _as_batch(src_ids)
        mask = encoder_self_mask(lengths_of(ids), ids.shape[1], unidirectional)
        enc = encode(ids, mask, self.config, self.params, rng=rng, training=training)
        if self.multimodal:
            if regions is None:
                raise DataError("multimodal model needs region features")
            from .multimodal import cross_modal_interaction, project_regions
            regions = nx.as_tensor(regions)
            if regions.ndim == 2:
                regions = regions.reshape(1, *regions.shape)
            if region_mask is None:
                region_mask = np.ones(regions.shape[:2], dtype=bool)
            region_mask = np.asarray(region_mask, dtype=bool).reshape(regions.shape[:2])
            v = project_regions(regions, self.params["vis.proj.w"], self.params["vis.proj.b"])
            states, attn = cross_modal_interaction(enc.states, v, region_mask, self.params)
            enc = EncodedSource(states=states, lengths=enc.lengths, cmi_attention=attn)
        return enc

    def decode(self, tgt_ids, encoded: EncodedSource, cross_mask, *, rng=None,
               training: bool = False) -> Tensor:
        return decoder_forward(tgt_ids, encoded, cross_mask, self.config, self.params,
                               rng=rng, training=training)
