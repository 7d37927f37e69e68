"""Optimisation: Adam with the noam schedule, clipping, early stopping, fine-tuning."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import load_container, save_container
from .data import MultimodalExample, batch_iterator, collate
from .errors import ConfigError, ContractError, DimensionError, NumericalError
from .evaluation import bleu, corpus_token_f1
from .multimodal import SupervisionConfig, alignment_loss, multitask_loss
from .simultaneous import batch_cross_mask, batch_greedy_decode, prefix_truncate_batch
from .transformer import EOS, PAD, ModelConfig, Transformer

log = logging.getLogger(__name__)

REGIMES = ("consecutive", "waitk", "prefix")
FINETUNE_LR = 1e-5


@dataclass
class TrainRegime:
    kind: str = "consecutive"
    k: int = 1
    truncation_probability: float = 0.5

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.kind!r}")
        if self.k < 1:
            raise ConfigError("wait-k training needs k >= 1")
        if not 0.0 <= self.truncation_probability <= 1.0:
            raise ConfigError("truncation probability must be in [0, 1]")


@dataclass
class TrainConfig:
    lr_scale: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 4000
    batch_size: int = 32
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    regime: TrainRegime = field(default_factory=TrainRegime)
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    # fixed learning rate that bypasses the schedule (fine-tuning)
    constant_lr: Optional[float] = None
    # wait-k used for validation decoding; None decodes consecutively
    valid_k: Optional[int] = None
    valid_batch_size: int = 100

    def __post_init__(self):
        if isinstance(self.regime, dict):
            self.regime = TrainRegime(**self.regime)
        if isinstance(self.supervision, dict):
            self.supervision = SupervisionConfig(**self.supervision)
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        for name in ("lr_scale", "warmup_steps", "batch_size", "clip_norm", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.valid_k is not None and self.valid_k < 1:
            raise ConfigError("valid_k must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def noam_lr(step: int, warmup: int, model_dim: int, scale: float) -> float:
    if step < 1:
        raise ContractError("noam schedule is defined for step >= 1")
    return scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds it.

    Returns ``(grads, pre_clip_norm)``.
    """
    bad = [name for name, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NumericalError(f"non-finite gradients in: {', '.join(sorted(bad))}")
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


def adam_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam, in place on ``params`` and ``state``."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# loss and evaluation


def compute_loss(model: Transformer, batch, cfg: TrainConfig, rng=None, training: bool = True):
    """Return ``(total, l_mt, l_align)``; ``l_align`` is a float for logging."""
    enc = model.encode(batch.src, regions=batch.regions, region_mask=batch.region_mask,
                       rng=rng, training=training)
    t = batch.tgt.shape[1] - 1
    k = cfg.regime.k if cfg.regime.kind == "waitk" else None
    cross = batch_cross_mask(k, t, batch.src_lens, batch.src.shape[1])
    logits = model.decode(batch.tgt[:, :-1], enc, cross, rng=rng, training=training)
    l_mt = nx.cross_entropy_label_smoothed(logits, batch.tgt[:, 1:], cfg.label_smoothing, PAD)
    sup = cfg.supervision
    l_align_value = 0.0
    total = l_mt * sup.alpha if sup.alpha != 1.0 else l_mt
    if enc.cmi_attention is not None and any(a is not None for a in batch.alignments):
        if sup.beta > 0:
            l_align = alignment_loss(enc.cmi_attention, batch.alignments)
            total = multitask_loss(l_mt, l_align, sup)
            l_align_value = float(l_align.data)
        else:
            with nx.no_grad():
                l_align_value = float(alignment_loss(nx.Tensor(enc.cmi_attention.data),
                                                     batch.alignments).data)
    return total, l_mt, l_align_value


def _positional_matches(hyp, ref):
    return sum(1 for a, b in zip(hyp, ref) if a == b)


def evaluate_model(model: Transformer, examples: Sequence[MultimodalExample],
                   k: Optional[int] = None, batch_size: int = 100,
                   ambiguous_ids: Optional[set] = None) -> dict:
    """Greedy-decode ``examples`` (wait-k or consecutive) and score them.

    Scores use token ids directly: token F1, BLEU, positional token accuracy
    (EOS included), accuracy on ambiguous target ids, and the alignment loss
    when annotations are present.
    """
    hyps, refs = [], []
    align_vals, align_n = 0.0, 0
    attention = []
    matches = total = amb_hit = amb_total = 0
    for start in range(0, len(examples), batch_size):
        chunk = list(examples[start:start + batch_size])
        batch = collate(chunk)
        res = batch_greedy_decode(model, [ex.src for ex in chunk], k,
                                  regions=batch.regions, region_mask=batch.region_mask)
        for i, (ex, toks) in enumerate(zip(chunk, res.tokens)):
            ref = ex.tgt[1:-1].tolist()
            hyps.append(toks)
            refs.append(ref)
            full_h = toks + ([] if res.truncated[i] else [EOS])
            matches += _positional_matches(full_h, ref + [EOS])
            total += len(ref) + 1
            if ambiguous_ids:
                for pos, tok in enumerate(ref):
                    if tok in ambiguous_ids:
                        amb_total += 1
                        amb_hit += pos < len(toks) and toks[pos] == tok
        if res.source_attention is not None:
            attention.extend(res.source_attention[i, : len(ex.src)] for i, ex in enumerate(chunk))
            if any(a is not None for a in batch.alignments):
                n_annot = sum(a is not None and a.any_annotated() for a in batch.alignments)
                val = alignment_loss(nx.Tensor(res.source_attention), batch.alignments)
                align_vals += float(val.data) * n_annot
                align_n += n_annot
    out = {
        "f1": corpus_token_f1(hyps, refs),
        "bleu": bleu(hyps, refs) if refs else 0.0,
        "accuracy": matches / total if total else 0.0,
        "hypotheses": hyps,
    }
    if ambiguous_ids:
        out["ambiguous_accuracy"] = amb_hit / amb_total if amb_total else float("nan")
    if align_n:
        out["align_loss"] = align_vals / align_n
    if attention:
        out["attention"] = attention
    return out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    seed: int = 0
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    train_config: Optional[dict] = None
    best_score: Optional[list] = None
    epoch: int = 0
    rng_state: Optional[dict] = None
    vocabs: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def to_model(self) -> Transformer:
        params = {n: nx.Tensor(v.copy(), requires_grad=True, name=n)
                  for n, v in self.params.items()}
        return Transformer(self.model_config, self.seed, params)

    def save(self, path) -> None:
        tensors = {f"param/{n}": v for n, v in self.params.items()}
        for n, v in self.optimizer.m.items():
            tensors[f"adam_m/{n}"] = v
        for n, v in self.optimizer.v.items():
            tensors[f"adam_v/{n}"] = v
        header = {
            "model_config": self.model_config.to_dict(), "seed": self.seed,
            "optimizer_step": self.optimizer.step, "train_config": self.train_config,
            "best_score": self.best_score, "epoch": self.epoch, "rng_state": self.rng_state,
            "vocabs": self.vocabs, "history": self.history,
        }
        save_container(path, tensors, header)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, h = load_container(path)
        params, m, v = {}, {}, {}
        for key, arr in tensors.items():
            kind, name = key.split("/", 1)
            {"param": params, "adam_m": m, "adam_v": v}[kind][name] = arr
        return cls(params=params, model_config=ModelConfig.from_dict(h["model_config"]),
                   seed=h["seed"], optimizer=OptimizerState(m, v, h["optimizer_step"]),
                   train_config=h.get("train_config"), best_score=h.get("best_score"),
                   epoch=h.get("epoch", 0), rng_state=h.get("rng_state"),
                   vocabs=h.get("vocabs") or {}, history=h.get("history") or [])


class TrainingDiverged(NumericalError):
    def __init__(self, message, checkpoint: Optional[Checkpoint] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepStats:
    loss: float
    mt_loss: float
    align_loss: float
    grad_norm: float
    lr: float


class Trainer:
    """One model, one optimizer, one RNG; ``train_step`` is one Adam update."""

    def __init__(self, model: Transformer, cfg: TrainConfig,
                 state: Optional[OptimizerState] = None, rng_state: Optional[dict] = None):
        self.model = model
        self.cfg = cfg
        self.state = state if state is not None else OptimizerState()
        self.rng = np.random.default_rng(cfg.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state

    def current_lr(self) -> float:
        if self.cfg.constant_lr is not None:
            return self.cfg.constant_lr
        return noam_lr(self.state.step + 1, self.cfg.warmup_steps, self.model.config.model_dim,
                       self.cfg.lr_scale)

    def truncate(self, pairs):
        if self.cfg.regime.kind != "prefix":
            return pairs
        return prefix_truncate_batch(pairs, self.rng, self.cfg.regime.truncation_probability)

    def train_step(self, batch) -> StepStats:
        self.model.zero_grad()
        with nx.Tape() as tape:
            total, l_mt, l_align = compute_loss(self.model, batch, self.cfg, self.rng, True)
            tape.backward(total)
        grads = {n: p.grad for n, p in self.model.params.items() if p.grad is not None}
        grads, norm = clip_gradients(grads, self.cfg.clip_norm)
        lr = self.current_lr()
        adam_step(self.model.params, grads, self.state, lr, self.cfg)
        self.model.zero_grad()
        return StepStats(float(total.data), float(l_mt.data), l_align, norm, lr)

    def snapshot(self, epoch: int, best_score=None, history=None, vocabs=None) -> Checkpoint:
        return Checkpoint(
            params={n: p.data.copy() for n, p in self.model.params.items()},
            model_config=self.model.config, seed=self.model.seed,
            optimizer=OptimizerState({n: a.copy() for n, a in self.state.m.items()},
                                     {n: a.copy() for n, a in self.state.v.items()},
                                     self.state.step),
            train_config=self.cfg.to_dict(), best_score=best_score, epoch=epoch,
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
            vocabs=dict(vocabs or {}), history=list(history or []))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig) -> "Trainer":
        st = ckpt.optimizer
        state = OptimizerState({n: a.copy() for n, a in st.m.items()},
                               {n: a.copy() for n, a in st.v.items()}, st.step)
        return cls(ckpt.to_model(), cfg, state, ckpt.rng_state)


def selection_key(metrics: dict, supervised: bool) -> tuple:
    """Validation ranking: token F1, then BLEU, then (supervised) lower alignment loss."""
    align = -metrics.get("align_loss", 0.0) if supervised else 0.0
    return (round(metrics["f1"], 12), round(metrics["bleu"], 12), align)


def _validate(model, valid_set, cfg, ambiguous_ids=None):
    return evaluate_model(model, valid_set, cfg.valid_k, cfg.valid_batch_size, ambiguous_ids)


def train(cfg: TrainConfig, model: Transformer, train_set: Sequence[MultimodalExample],
          valid_set: Sequence[MultimodalExample], *, log_path=None, checkpoint_path=None,
          vocabs: Optional[dict] = None, trainer: Optional[Trainer] = None,
          evaluate_initial: bool = False, start_epoch: int = 1,
          stop: Optional[Callable[[dict], bool]] = None) -> Checkpoint:
    """Train with early stopping on the validation selection key.

    ``stop`` is called with each epoch's log entry and ends the run when it
    returns True. Returns the best checkpoint. Deterministic given ``cfg.seed``.
    """
    if not train_set or not valid_set:
        raise ConfigError("train and validation splits must be non-empty")
    if cfg.supervision.beta > 0 and not model.multimodal:
        raise ConfigError("alignment supervision needs a multimodal model")
    trainer = trainer or Trainer(model, cfg)
    model = trainer.model
    supervised = cfg.supervision.beta > 0
    history: list[dict] = []
    best_key, best = None, None
    bad_epochs = 0
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def record(epoch, metrics, stats):
        nonlocal best_key, best, bad_epochs
        key = selection_key(metrics, supervised)
        entry = {"epoch": epoch, "val_f1": metrics["f1"], "val_bleu": metrics["bleu"],
                 "val_accuracy": metrics["accuracy"], "val_align": metrics.get("align_loss")}
        if stats:
            norms = [s.grad_norm for s in stats]
            entry.update(train_loss=float(np.mean([s.loss for s in stats])),
                         mt_loss=float(np.mean([s.mt_loss for s in stats])),
                         align_loss=float(np.mean([s.align_loss for s in stats])),
                         lr=stats[-1].lr, lr_min=min(s.lr for s in stats),
                         lr_max=max(s.lr for s in stats),
                         grad_norm_mean=float(np.mean(norms)), grad_norm_max=float(max(norms)),
                         steps=trainer.state.step)
        improved = best_key is None or key > best_key
        entry["best"] = improved
        history.append(entry)
        if log_fh:
            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()
        log.info("epoch %d: %s", epoch, entry)
        if improved:
            best_key = key
            bad_epochs = 0
            best = trainer.snapshot(epoch, list(key), history, vocabs)
            if checkpoint_path:
                best.save(checkpoint_path)
        else:
            bad_epochs += 1

    try:
        if evaluate_initial:
            record(start_epoch - 1, _validate(model, valid_set, cfg), [])
        last_good = trainer.snapshot(start_epoch - 1, None, history, vocabs)
        for epoch in range(start_epoch, start_epoch + cfg.max_epochs):
            stats = []
            try:
                for batch in batch_iterator(train_set, cfg.batch_size, shuffle=True,
                                            seed=cfg.seed, epoch=epoch,
                                            transform=trainer.truncate):
                    stats.append(trainer.train_step(batch))
            except NumericalError as err:
                raise TrainingDiverged(f"training diverged in epoch {epoch}: {err}",
                                       best or last_good) from err
            record(epoch, _validate(model, valid_set, cfg), stats)
            last_good = trainer.snapshot(epoch, None, history, vocabs)
            if bad_epochs > cfg.patience or (stop is not None and stop(history[-1])):
                break
    finally:
        if log_fh:
            log_fh.close()
    best.history = history
    if checkpoint_path:
        best.save(checkpoint_path)
    return best


def finetune_supervised(base: Checkpoint, cfg: TrainConfig,
                        train_set: Sequence[MultimodalExample],
                        valid_set: Sequence[MultimodalExample], **kwargs) -> Checkpoint:
    """Continue a beta=0 checkpoint with alpha = beta = 1 at a constant 1e-5.

    Optimizer moments start fresh. Epoch 0 in the history is the base model.
    """
    if not base.model_config.multimodal:
        raise ConfigError("fine-tuned supervision needs a multimodal checkpoint")
    if not any(ex.alignment is not None and ex.alignment.any_annotated() for ex in train_set):
        raise ConfigError("fine-tuned supervision needs annotated training examples")
    ft_cfg = dataclasses.replace(cfg, constant_lr=FINETUNE_LR,
                                 supervision=SupervisionConfig(1.0, 1.0, "finetune"))
    model = base.to_model()
    trainer = Trainer(model, ft_cfg)
    return train(ft_cfg, model, train_set, valid_set, trainer=trainer,
                 evaluate_initial=True, vocabs=base.vocabs, **kwargs)
