"""Translation and grounding metrics."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError
from .multimodal import BoundingBox

log = logging.getLogger(__name__)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1] with a single reference per sentence.

    Smoothing: for n >= 2, an order with zero clipped matches uses
    ``1 / (total + 1)`` instead of 0. A zero unigram precision gives 0.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if any(len(r) == 0 for r in references) or not references:
        raise DataError("empty reference")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        if matches[n] == 0:
            log_p += math.log(1.0 / (totals[n] + 1))
        else:
            log_p += math.log(matches[n] / totals[n])
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / max_n)


def token_f1(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Bag-of-words F1 between one hypothesis and its reference."""
    if not hyp and not ref:
        return 1.0
    if not hyp or not ref:
        return 0.0
    overlap = sum((Counter(hyp) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(hyp), overlap / len(ref)
    return 2 * p * r / (p + r)


def corpus_token_f1(hypotheses, references) -> float:
    if len(hypotheses) != len(references):
        raise ContractError("hypothesis and reference counts differ")
    if not references:
        return 0.0
    return float(np.mean([token_f1(h, r) for h, r in zip(hypotheses, references)]))


def prefix_accuracy(hypotheses, references, n: float) -> float:
    """Position-wise matches within the first ``n`` words, summed, per sentence.

    Unigram accuracy (``n=1``) lies in [0, 1]; in general the value lies in
    [0, n]. ``n=math.inf`` counts every position.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if len(hypotheses) != len(references):
        raise ContractError("hypothesis and reference counts differ")
    if not references:
        return 0.0
    total = 0
    for hyp, ref in zip(hypotheses, references):
        upto = min(len(hyp), len(ref)) if math.isinf(n) else min(int(n), len(hyp), len(ref))
        total += sum(1 for i in range(upto) if hyp[i] == ref[i])
    return total / len(references)


def _box(b) -> BoundingBox:
    return b if isinstance(b, BoundingBox) else BoundingBox(*map(float, b))


def iou(a, b) -> float:
    a, b = _box(a), _box(b)
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


@dataclass
class GroundingRecord:
    predicted_index: int
    predicted_box: BoundingBox
    gold_boxes: list[BoundingBox]
    predicted_label: Optional[str] = None
    gold_label: Optional[str] = None
    peak: float = 0.0                       # max attention weight of the row

    def __post_init__(self):
        if not self.gold_boxes:
            raise DataError("grounding record needs at least one gold box")


def grounding_score(records: Sequence[GroundingRecord], iou_threshold: float = 0.5) -> dict:
    """Mean best-match IoU over annotated words and the fraction above threshold."""
    if not records:
        raise ContractError("grounding_score needs at least one record")
    scores = [max(iou(r.predicted_box, g) for g in r.gold_boxes) for r in records]
    return {"mean_iou": float(np.mean(scores)),
            "accuracy_at_threshold": float(np.mean([s >= iou_threshold for s in scores])),
            "count": len(scores)}


def grounding_records(attention: np.ndarray, annotation, region_boxes: Sequence,
                      region_labels: Optional[Sequence[str]] = None,
                      valid_mask: Optional[np.ndarray] = None) -> list[GroundingRecord]:
    """One record per annotated source word from its CMI attention row.

    ``attention`` is ``[N, R]``; the most-attended valid region (lowest index
    on ties) is the prediction. Gold boxes are the annotation regions linked
    to the word.
    """
    att = np.asarray(attention, dtype=np.float64)
    if valid_mask is not None:
        att = np.where(np.asarray(valid_mask, dtype=bool)[None, :], att, -np.inf)
    links: dict[int, set[int]] = {}
    for toks, regs in annotation.alignments:
        for j in toks:
            links.setdefault(j, set()).update(regs)
    out = []
    for j in sorted(links):
        if j >= att.shape[0] or not links[j]:
            continue
        pred = int(np.argmax(att[j]))
        gold = [annotation.regions[r] for r in sorted(links[j])]
        out.append(GroundingRecord(
            predicted_index=pred,
            predicted_box=_box(region_boxes[pred]),
            gold_boxes=[g.box for g in gold],
            predicted_label=None if region_labels is None else region_labels[pred],
            gold_label=gold[0].label,
            peak=float(att[j, pred])))
    return out


@dataclass
class LabelSimilarity:
    cosine: Optional[float]
    exact: bool


def label_similarity(predicted_label: str, gold_label: str,
                     embeddings: dict[str, np.ndarray]) -> LabelSimilarity:
    """Exact match plus embedding cosine; cosine is None when a word is missing."""
    p, g = predicted_label.lower(), gold_label.lower()
    cos = None
    if p in embeddings and g in embeddings:
        u, v = embeddings[p], embeddings[g]
        denom = float(np.linalg.norm(u) * np.linalg.norm(v))
        cos = float(u @ v) / denom if denom > 0 else 0.0
    return LabelSimilarity(cosine=cos, exact=p == g)


def label_scores(pairs: Sequence[tuple[str, str]], embeddings: dict[str, np.ndarray]) -> dict:
    sims = [label_similarity(p, g, embeddings) for p, g in pairs]
    cos = [s.cosine for s in sims if s.cosine is not None]
    missing = len(sims) - len(cos)
    if missing:
        log.warning("%d label pairs without embeddings excluded from the cosine mean", missing)
    return {"cosine": float(np.mean(cos)) if cos else float("nan"),
            "exact_match": float(np.mean([s.exact for s in sims])) if sims else float("nan"),
            "count": len(sims), "missing_embeddings": missing}


def load_embeddings(path) -> dict[str, np.ndarray]:
    """GloVe text layout: token followed by its floats, whitespace separated."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric embedding value") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
            table[parts[0].lower()] = vec
    return table


def report_line(metric: str, value: float, count: int, **config) -> str:
    """Structured metric report, one JSON object per line."""
    return json.dumps({"metric": metric, "value": value, "count": count, "config": config},
                      sort_keys=True)
