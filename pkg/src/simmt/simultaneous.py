"""Wait-k schedules, training-time masks, prefix truncation and greedy decoding.

Two decoding paths are provided:

* :func:`greedy_waitk_decode` interleaves READ and WRITE actions one
  sentence at a time, extending the encoder one source token per READ.
* :func:`batch_greedy_decode` encodes whole sources once and enforces the
  schedule through the decoder cross-attention mask. With a unidirectional
  encoder both give the same tokens; tests pin the logits to 1e-9.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, DataError
from .multimodal import cross_modal_interaction, project_regions
from .transformer import (BOS, EOS, PAD, EncodedSource, Transformer, _feed_forward, _ln,
                          multi_head_attention, positional_encoding)

READ, WRITE = "R", "W"
CACHE_POLICIES = ("incremental", "reencode")


def g_waitk(k: int, t: int, src_len: int) -> int:
    """Source tokens read before writing target token ``t`` (1-based)."""
    if k < 1 or t < 1 or src_len < 1:
        raise ContractError(f"g_waitk needs positive arguments, got k={k}, t={t}, |x|={src_len}")
    return min(k + t - 1, src_len)


def unidirectional_encoder_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ContractError("mask size must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def waitk_cross_mask(k: int, tgt_len: int, src_len: int) -> np.ndarray:
    """Row ``t`` (0-based) is readable on the first ``g_waitk(k, t+1, src_len)`` columns."""
    if min(k, tgt_len, src_len) < 1:
        raise ContractError("waitk_cross_mask needs positive arguments")
    widths = np.minimum(k + np.arange(tgt_len), src_len)
    return np.arange(src_len)[None, :] < widths[:, None]


def batch_cross_mask(k: Optional[int], tgt_len: int, src_lens: Sequence[int],
                     src_width: int) -> np.ndarray:
    """``[B, T, N]`` cross mask for a padded batch; ``k=None`` means consecutive."""
    lens = np.asarray(src_lens)
    if k is None:
        widths = np.broadcast_to(lens[:, None], (len(lens), tgt_len))
    else:
        widths = np.minimum(k + np.arange(tgt_len)[None, :], lens[:, None])
    return np.arange(src_width)[None, None, :] < widths[:, :, None]


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def prefix_truncate_batch(batch, rng: np.random.Generator, p: float = 0.5,
                          return_flags: bool = False):
    """Truncate each ``(x, y)`` pair to proportional prefixes with probability ``p``.

    ``l_x`` is uniform on ``1..|x|`` and ``l_y = max(2, round(l_x |y| / |x|))``
    so that ``y[:l_y]`` always keeps BOS plus at least one token.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"truncation probability must be in [0, 1], got {p}")
    out, flags = [], []
    for x, y in batch:
        if len(y) == 0 or y[0] != BOS:
            raise DataError("target sequence must start with BOS")
        if len(x) < 1 or len(y) < 2:
            raise DataError("prefix truncation needs |x| >= 1 and |y| >= 2")
        cut = rng.random() < p
        if cut:
            lx = int(rng.integers(1, len(x) + 1))
            ly = max(2, round_half_away(lx * len(y) / len(x)))
            x, y = x[:lx], y[:ly]
        out.append((x, y))
        flags.append(cut)
    return (out, flags) if return_flags else out


@dataclass
class DecodeTrace:
    actions: list[str] = field(default_factory=list)
    emitted: list[int] = field(default_factory=list)
    read_counts: list[int] = field(default_factory=list)
    # per WRITE: CMI attention row of the most recently read source token
    cmi_attention: Optional[list[list[float]]] = None
    # per READ: CMI attention row of the token just read
    source_attention: Optional[list[list[float]]] = None
    truncated: bool = False

    @property
    def action_string(self) -> str:
        return "".join(self.actions)

    @property
    def tokens(self) -> list[int]:
        """Emitted tokens without the final EOS."""
        return self.emitted[:-1] if self.emitted and self.emitted[-1] == EOS else list(self.emitted)

    def to_json(self) -> str:
        rec = {"actions": self.action_string, "tokens": self.emitted,
               "read_counts": self.read_counts, "truncated": self.truncated}
        if self.cmi_attention is not None:
            rec["attention"] = self.cmi_attention
        if self.source_attention is not None:
            rec["source_attention"] = self.source_attention
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "DecodeTrace":
        rec = json.loads(line)
        return cls(actions=list(rec["actions"]), emitted=list(rec["tokens"]),
                   read_counts=list(rec["read_counts"]),
                   cmi_attention=rec.get("attention"),
                   source_attention=rec.get("source_attention"),
                   truncated=bool(rec.get("truncated", False)))


def write_traces(path, traces: Iterable[DecodeTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(tr.to_json() + "\n")


def read_traces(path) -> list[DecodeTrace]:
    with open(path, encoding="utf-8") as fh:
        return [DecodeTrace.from_json(line) for line in fh if line.strip()]


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def _pick(logits: np.ndarray) -> np.ndarray:
    """Greedy choice over the last axis; PAD and BOS are never emitted."""
    scores = np.array(logits, copy=True)
    scores[..., [PAD, BOS]] = -np.inf
    return scores.argmax(axis=-1)


class _StreamingEncoder:
    """Encoder state for a growing source prefix.

    ``incremental`` keeps the layer-normalised inputs of every layer so a new
    token costs one query row per layer; ``reencode`` reruns the encoder on
    the whole prefix at each READ.
    """

    def __init__(self, model: Transformer, policy: str, regions=None, region_mask=None):
        if policy not in CACHE_POLICIES:
            raise ContractError(f"encoder cache policy must be one of {CACHE_POLICIES}")
        if policy == "incremental" and not model.config.unidirectional_encoder:
            policy = "reencode"
        self.model = model
        self.policy = policy
        self.tokens: list[int] = []
        self.rows: list[np.ndarray] = []
        self.attn_rows: list[np.ndarray] = []
        self._cache: list[Optional[np.ndarray]] = [None] * model.config.num_layers
        self.regions = self.region_mask = self.v_proj = None
        if model.multimodal:
            if regions is None:
                raise DataError("multimodal model needs region features for decoding")
            regions = np.asarray(getattr(regions, "data", regions), dtype=np.float64)
            if regions.ndim == 3:
                # a batch of one image
                if regions.shape[0] != 1:
                    raise DataError("streaming decoding takes the regions of one image")
                regions = regions[0]
                region_mask = None if region_mask is None else np.asarray(region_mask)[0]
            self.regions = nx.Tensor(regions)
            self.region_mask = (np.ones(regions.shape[0], dtype=bool) if region_mask is None
                                else np.asarray(region_mask, dtype=bool))
            p = model.params
            self.v_proj = project_regions(self.regions, p["vis.proj.w"], p["vis.proj.b"])

    def read(self, token: int) -> None:
        self.tokens.append(int(token))
        if self.policy == "reencode":
            enc = self.model.encode(np.array(self.tokens)[None], regions=self.regions,
                                    region_mask=self.region_mask)
            self.rows = list(enc.states.data[0])
            if enc.cmi_attention is not None:
                self.attn_rows = list(enc.cmi_attention.data[0])
            return
        cfg, p = self.model.config, self.model.params
        table = p["src_embed"].data
        if not 0 <= token < table.shape[0]:
            raise DataError(f"token id {token} outside source vocabulary")
        pos = len(self.tokens) - 1
        pe = positional_encoding(pos + 1, cfg.model_dim)[pos]
        x = nx.Tensor((table[token] * math.sqrt(cfg.model_dim) + pe)[None, None])
        for layer in range(cfg.num_layers):
            pre = f"enc.{layer}"
            h = _ln(x, p, f"{pre}.ln1")
            prev = self._cache[layer]
            keys = h.data if prev is None else np.concatenate([prev, h.data], axis=1)
            self._cache[layer] = keys
            kt = nx.Tensor(keys)
            a, _ = multi_head_attention(h, kt, kt, None, p, f"{pre}.self", cfg.num_heads)
            x = x + a
            h = _ln(x, p, f"{pre}.ln2")
            x = x + _feed_forward(h, p, f"{pre}.ff", 0.0, None, False)
        x = _ln(x, p, "enc.ln")
        if self.v_proj is not None:
            x, attn = cross_modal_interaction(x, self.v_proj.reshape(1, *self.v_proj.shape),
                                              self.region_mask[None], p)
            self.attn_rows.append(attn.data[0, 0])
        self.rows.append(x.data[0, 0])

    def states(self) -> EncodedSource:
        st = nx.Tensor(np.stack(self.rows)[None])
        return EncodedSource(states=st, lengths=np.array([len(self.rows)]))


class _StreamingDecoder:
    """Decoder that computes one new target position per WRITE.

    Earlier positions keep the states they had when they were written, so
    position ``t`` only ever saw ``g(t)`` source tokens, exactly as under
    the training-time cross mask.
    """

    def __init__(self, model: Transformer):
        self.model = model
        self._cache: list[Optional[np.ndarray]] = [None] * model.config.num_layers
        self.length = 0

    def step(self, token: int, memory: nx.Tensor) -> np.ndarray:
        cfg, p = self.model.config, self.model.params
        table = p["tgt_embed"].data
        pos = self.length
        pe = positional_encoding(pos + 1, cfg.model_dim)[pos]
        x = nx.Tensor((table[token] * math.sqrt(cfg.model_dim) + pe)[None, None])
        for layer in range(cfg.num_layers):
            pre = f"dec.{layer}"
            h = _ln(x, p, f"{pre}.ln1")
            prev = self._cache[layer]
            keys = h.data if prev is None else np.concatenate([prev, h.data], axis=1)
            self._cache[layer] = keys
            kt = nx.Tensor(keys)
            a, _ = multi_head_attention(h, kt, kt, None, p, f"{pre}.self", cfg.num_heads)
            x = x + a
            h = _ln(x, p, f"{pre}.ln2")
            a, _ = multi_head_attention(h, memory, memory, None, p, f"{pre}.cross", cfg.num_heads)
            x = x + a
            h = _ln(x, p, f"{pre}.ln3")
            x = x + _feed_forward(h, p, f"{pre}.ff", 0.0, None, False)
        x = _ln(x, p, "dec.ln").data[0, 0]
        self.length += 1
        w = table.T if cfg.share_tgt_output_embeddings else p["out.w"].data
        return x @ w + p["out.b"].data


def greedy_waitk_decode(model: Transformer, src_stream: Sequence[int], k: int,
                        max_len: Optional[int] = None, *, regions=None, region_mask=None,
                        encoder_cache_policy: str = "incremental",
                        return_logits: bool = False):
    """Simultaneous greedy decoding under the wait-k schedule.

    Reads ``g_waitk(k, t, |x|)`` source tokens before the ``t``-th WRITE.
    Each WRITE takes the argmax of the next-token distribution (PAD and BOS
    excluded) given the target prefix and the encoding of the tokens read
    so far. Stops at EOS
    or after ``max_len`` WRITEs, in which case the trace is flagged
    ``truncated``. With ``return_logits`` also returns the per-WRITE logits.
    """
    src = [int(t) for t in src_stream]
    if not src:
        raise DataError("cannot decode an empty source")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    max_len = default_max_len(len(src)) if max_len is None else max_len
    with nx.no_grad():
        enc = _StreamingEncoder(model, encoder_cache_policy, regions, region_mask)
        trace = DecodeTrace()
        if model.multimodal:
            trace.cmi_attention, trace.source_attention = [], []
        dec = _StreamingDecoder(model)
        last = BOS
        logits_out = []
        while True:
            t = len(trace.emitted) + 1
            g = g_waitk(k, t, len(src))
            while len(enc.tokens) < g:
                enc.read(src[len(enc.tokens)])
                trace.actions.append(READ)
                if model.multimodal:
                    trace.source_attention.append(enc.attn_rows[-1].tolist())
            logits = dec.step(last, enc.states().states)
            token = int(_pick(logits))
            logits_out.append(logits)
            trace.actions.append(WRITE)
            trace.emitted.append(token)
            trace.read_counts.append(g)
            if model.multimodal:
                trace.cmi_attention.append(enc.attn_rows[g - 1].tolist())
            last = token
            if token == EOS:
                break
            if len(trace.emitted) >= max_len:
                trace.truncated = True
                break
    return (trace, np.array(logits_out)) if return_logits else trace


def consecutive_decode(model: Transformer, src: Sequence[int], max_len: Optional[int] = None,
                       **kwargs) -> list[int]:
    """Full-sentence greedy decoding: wait-k with ``k = |x|``."""
    return greedy_waitk_decode(model, src, max(1, len(src)), max_len, **kwargs).tokens


@dataclass
class BatchDecodeResult:
    tokens: list[list[int]]
    truncated: list[bool]
    # [B, N, R] CMI attention for the source tokens; None for text-only models
    source_attention: Optional[np.ndarray] = None


def batch_greedy_decode(model: Transformer, sources: Sequence[Sequence[int]], k: Optional[int],
                        max_len: Optional[int] = None, *, regions=None,
                        region_mask=None) -> BatchDecodeResult:
    """Lock-step greedy decoding of a batch; ``k=None`` decodes consecutively.

    Sources are encoded once in full; the schedule lives in the cross mask,
    which for a unidirectional encoder is equivalent to incremental reading.
    """
    if k is not None and not model.config.unidirectional_encoder:
        raise ContractError("masked batch decoding under wait-k needs a unidirectional encoder")
    b = len(sources)
    if b == 0:
        return BatchDecodeResult([], [])
    lens = np.array([len(s) for s in sources])
    if lens.min() < 1:
        raise DataError("cannot decode an empty source")
    src = np.full((b, lens.max()), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
    limits = np.array([default_max_len(n) if max_len is None else max_len for n in lens])
    out = np.full((b, limits.max() + 1), PAD, dtype=np.int64)
    out[:, 0] = BOS
    done = np.zeros(b, dtype=bool)
    truncated = np.zeros(b, dtype=bool)
    with nx.no_grad():
        enc = model.encode(src, regions=regions, region_mask=region_mask)
        steps = 0
        while not done.all():
            t = steps + 1
            live = np.nonzero(~done)[0]
            cross = batch_cross_mask(k, t, lens[live], src.shape[1])
            sub = EncodedSource(nx.Tensor(enc.states.data[live]), lens[live])
            logits = model.decode(out[live, :t], sub, cross).data[:, -1]
            tok = _pick(logits)
            out[live, t] = tok
            steps = t
            for j, i in enumerate(live):
                if tok[j] == EOS:
                    done[i] = True
                elif t >= limits[i]:
                    done[i] = truncated[i] = True
    tokens = []
    for i in range(b):
        row = out[i, 1:].tolist()
        cut = row.index(EOS) if EOS in row else int(limits[i])
        tokens.append(row[:cut])
    attn = None if enc.cmi_attention is None else enc.cmi_attention.data
    return BatchDecodeResult(tokens, truncated.tolist(), attn)
