"""Desk-scale recipes on the synthetic grounding corpus.

Shared by the command line, the scripts in ``scripts/`` and the acceptance
suite, so every number comes from one code path.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (MultimodalExample, SyntheticCorpusSpec, Vocabulary, build_vocab,
                   generate_synthetic_corpus, load_synthetic_split, read_lines,
                   write_synthetic_corpus)
from .errors import ConfigError
from .evaluation import grounding_records, grounding_score, label_scores
from .multimodal import SupervisionConfig
from .training import (Checkpoint, TrainConfig, TrainRegime, evaluate_model,
                       finetune_supervised, train)
from .transformer import BOS, EOS, ModelConfig, Transformer

log = logging.getLogger(__name__)


@dataclass
class SyntheticRecipe:
    """Model and optimiser settings sized for one CPU core."""

    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    num_layers: int = 2
    model_dim: int = 64
    ff_dim: int = 128
    num_heads: int = 4
    dropout: float = 0.1
    lr_scale: float = 1.0
    warmup_steps: int = 200
    max_epochs: int = 30
    patience: int = 5
    finetune_epochs: int = 20
    k: int = 1


@dataclass
class OverfitRecipe:
    """Memorise a tiny copy-and-shift corpus; a smoke test for the whole stack."""

    pairs: int = 32
    min_len: int = 3
    max_len: int = 7
    src_vocab_size: int = 20
    num_layers: int = 2
    model_dim: int = 64
    ff_dim: int = 128
    num_heads: int = 4
    lr_scale: float = 1.0
    warmup_steps: int = 100
    batch_size: int = 32
    max_epochs: int = 200
    target_accuracy: float = 0.99


def toy_overfit_corpus(recipe: OverfitRecipe, seed: int = 0) -> list[MultimodalExample]:
    """Target token ``i`` is source token ``i`` shifted past the source ids."""
    rng = np.random.default_rng(seed)
    shift = recipe.src_vocab_size - 4
    out = []
    for _ in range(recipe.pairs):
        x = rng.integers(4, recipe.src_vocab_size, size=rng.integers(recipe.min_len,
                                                                      recipe.max_len + 1))
        out.append(MultimodalExample(np.r_[x, EOS], np.r_[BOS, x + shift, EOS]))
    return out


def overfit_toy(recipe: OverfitRecipe, seed: int = 0, max_epochs: Optional[int] = None):
    """Train until greedy token accuracy on the training pairs reaches the target.

    Returns ``(checkpoint, first_epoch_at_target or None)``. Dropout and
    label smoothing are off: the goal is memorisation.
    """
    data = toy_overfit_corpus(recipe, seed)
    cfg = ModelConfig(num_layers=recipe.num_layers, model_dim=recipe.model_dim,
                      ff_dim=recipe.ff_dim, num_heads=recipe.num_heads,
                      src_vocab_size=recipe.src_vocab_size,
                      tgt_vocab_size=2 * recipe.src_vocab_size - 4, dropout=0.0)
    epochs = recipe.max_epochs if max_epochs is None else max_epochs
    tcfg = TrainConfig(lr_scale=recipe.lr_scale, warmup_steps=recipe.warmup_steps,
                       batch_size=recipe.batch_size, label_smoothing=0.0, max_epochs=epochs,
                       patience=epochs, seed=seed, valid_batch_size=recipe.pairs)
    ckpt = train(tcfg, Transformer(cfg, seed), data, data,
                 stop=lambda entry: entry["val_accuracy"] >= recipe.target_accuracy)
    first = next((h["epoch"] for h in ckpt.history
                  if h["val_accuracy"] >= recipe.target_accuracy), None)
    return ckpt, first


@dataclass
class SyntheticData:
    root: Path
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    train: list[MultimodalExample]
    valid: list[MultimodalExample]
    test: list[MultimodalExample]
    ambiguous_ids: set[int]
    feature_source: str = "gold"


def vocabs_from_corpus(root) -> tuple[Vocabulary, Vocabulary]:
    root = Path(root)
    src = build_vocab([s.split() for s in read_lines(root / "train.src")])
    tgt = build_vocab([s.split() for s in read_lines(root / "train.tgt")])
    return src, tgt


def load_synthetic(root, feature_source: str = "gold", vocabs=None) -> SyntheticData:
    root = Path(root)
    sv, tv = vocabs if vocabs is not None else vocabs_from_corpus(root)
    meta = json.loads((root / "meta.json").read_text())
    load = lambda split: load_synthetic_split(root, split, feature_source,
                                              src_vocab=sv, tgt_vocab=tv)
    amb = {tv.stoi[w] for w in meta["ambiguous_target_words"] if w in tv}
    return SyntheticData(root, sv, tv, load("train"), load("valid"), load("test"), amb,
                         feature_source)


def prepare_synthetic(spec: SyntheticCorpusSpec, out_dir,
                      feature_source: str = "gold") -> SyntheticData:
    write_synthetic_corpus(generate_synthetic_corpus(spec), out_dir)
    return load_synthetic(out_dir, feature_source)


def model_config(recipe: SyntheticRecipe, data: SyntheticData, multimodal: bool) -> ModelConfig:
    return ModelConfig(num_layers=recipe.num_layers, model_dim=recipe.model_dim,
                       ff_dim=recipe.ff_dim, num_heads=recipe.num_heads,
                       src_vocab_size=len(data.src_vocab), tgt_vocab_size=len(data.tgt_vocab),
                       dropout=recipe.dropout,
                       region_dim=recipe.corpus.region_dim if multimodal else 0)


def train_config(recipe: SyntheticRecipe, seed: int, beta: float = 0.0) -> TrainConfig:
    return TrainConfig(lr_scale=recipe.lr_scale, warmup_steps=recipe.warmup_steps,
                       max_epochs=recipe.max_epochs, patience=recipe.patience, seed=seed,
                       regime=TrainRegime("waitk", recipe.k), valid_k=recipe.k,
                       supervision=SupervisionConfig(1.0, beta, "scratch" if beta else "none"))


def _strip_examples(examples: Sequence[MultimodalExample]) -> list[MultimodalExample]:
    """Text-only copies of ``examples``."""
    return [dataclasses.replace(ex, regions=None, alignment=None) for ex in examples]


def grounding_report(model: Transformer, examples: Sequence[MultimodalExample], k: int = 1,
                     embeddings: Optional[dict] = None, iou_threshold: float = 0.5,
                     batch_size: int = 100) -> dict:
    """Wait-k decode, then score each annotated word's most-attended region.

    Region boxes come from the feature file (gold or detector); gold boxes
    from the annotations. ``attention`` holds the per-example ``[N, R]`` rows.
    """
    if not model.multimodal:
        raise ConfigError("grounding evaluation needs a multimodal checkpoint (no CMI layer)")
    annotated = [ex for ex in examples if ex.annotation is not None]
    if not annotated:
        raise ConfigError("grounding evaluation needs annotated examples")
    res = evaluate_model(model, annotated, k=k, batch_size=batch_size)
    records = []
    for ex, att in zip(annotated, res["attention"]):
        r = ex.regions.num_regions
        boxes = ex.regions.boxes or [reg.box for reg in ex.annotation.regions]
        records += grounding_records(att[:, :r], ex.annotation, boxes, ex.regions.labels,
                                     ex.regions.valid_mask)
    report = grounding_score(records, iou_threshold)
    report["mean_peak"] = float(np.mean([rec.peak for rec in records]))
    if embeddings is not None and all(rec.predicted_label for rec in records):
        labels = label_scores([(rec.predicted_label, rec.gold_label) for rec in records],
                              embeddings)
        report["cosine"], report["exact_match"] = labels["cosine"], labels["exact_match"]
    report["attention"] = res["attention"]
    report["examples"] = annotated
    return report


@dataclass
class SeedResult:
    seed: int
    base_grounding: float
    scratch_grounding: float
    finetune_grounding: float
    mmt_ambiguous_accuracy: float
    text_ambiguous_accuracy: float
    base_peak: float
    finetune_peak: float
    finetune_history: list
    checkpoints: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("checkpoints")
        return out


def run_seed(recipe: SyntheticRecipe, data: SyntheticData, seed: int,
             out_dir=None, text_only: bool = True) -> SeedResult:
    """Train the four systems of one seed: beta=0 base, beta=1 scratch,
    fine-tuned base, text-only baseline; score grounding and ambiguity."""
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = (lambda name: out / f"seed{seed}.{name}.ckpt") if out else (lambda name: None)
    vocabs = {"src": data.src_vocab.to_list(), "tgt": data.tgt_vocab.to_list()}
    mmt = model_config(recipe, data, multimodal=True)

    base = train(train_config(recipe, seed), Transformer(mmt, seed), data.train, data.valid,
                 checkpoint_path=ckpt_path("base"), vocabs=vocabs)
    scratch = train(train_config(recipe, seed, beta=1.0), Transformer(mmt, seed), data.train,
                    data.valid, checkpoint_path=ckpt_path("scratch"), vocabs=vocabs)
    ft_cfg = dataclasses.replace(train_config(recipe, seed), max_epochs=recipe.finetune_epochs)
    tuned = finetune_supervised(base, ft_cfg, data.train, data.valid,
                                checkpoint_path=ckpt_path("finetune"))

    g = {name: grounding_report(ck.to_model(), data.test, recipe.k)
         for name, ck in (("base", base), ("scratch", scratch), ("finetune", tuned))}
    mmt_amb = evaluate_model(base.to_model(), data.test, recipe.k,
                             ambiguous_ids=data.ambiguous_ids)["ambiguous_accuracy"]
    ckpts = {"base": base, "scratch": scratch, "finetune": tuned}
    text_amb = float("nan")
    if text_only:
        text = train(train_config(recipe, seed), Transformer(model_config(recipe, data, False), seed),
                     _strip_examples(data.train), _strip_examples(data.valid),
                     checkpoint_path=ckpt_path("text"), vocabs=vocabs)
        text_amb = evaluate_model(text.to_model(), _strip_examples(data.test), recipe.k,
                                  ambiguous_ids=data.ambiguous_ids)["ambiguous_accuracy"]
        ckpts["text"] = text
    result = SeedResult(seed, g["base"]["accuracy_at_threshold"],
                        g["scratch"]["accuracy_at_threshold"],
                        g["finetune"]["accuracy_at_threshold"], mmt_amb, text_amb,
                        g["base"]["mean_peak"], g["finetune"]["mean_peak"],
                        tuned.history, ckpts)
    log.info("seed %d: %s", seed, result.summary())
    return result
