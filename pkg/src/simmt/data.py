"""Vocabularies, corpus loading, batching and the synthetic grounding corpus."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .multimodal import (AlignmentMatrix, Annotation, BoundingBox, FeatureStore, Region,
                         RegionFeatures, build_alignment_matrix, read_annotations,
                         read_features, write_annotations, write_features)
from .transformer import BOS, EOS, PAD, UNK

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Word-level vocabulary; ids 0-3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        for tok in tokens:
            if tok in SPECIALS:
                continue
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, sentence, bos: bool = False, eos: bool = True) -> list[int]:
        words = sentence.lower().split() if isinstance(sentence, str) else list(sentence)
        ids = [self.stoi.get(w, UNK) for w in words]
        return ([BOS] if bos else []) + ids + ([EOS] if eos else [])

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:4]) != SPECIALS:
            raise DataError("vocabulary list must start with the four special tokens")
        return cls(itos[4:])


def build_vocab(sentences: Sequence, min_freq: int = 1) -> Vocabulary:
    """Frequency-descending, then lexicographic; tokens below ``min_freq`` dropped."""
    if not sentences:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for s in sentences:
        counts.update(s.lower().split() if isinstance(s, str) else s)
    kept = [t for t, c in counts.items() if c >= min_freq and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class MultimodalExample:
    src: np.ndarray                                 # EOS-terminated ids
    tgt: np.ndarray                                 # BOS ... EOS ids
    image_id: Optional[int] = None
    regions: Optional[RegionFeatures] = None
    alignment: Optional[AlignmentMatrix] = None
    annotation: Optional[Annotation] = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.tgt = np.asarray(self.tgt, dtype=np.int64)
        if len(self.src) < 1:
            raise DataError("source must have at least one token")
        if len(self.tgt) < 3 or self.tgt[0] != BOS or self.tgt[-1] != EOS:
            raise DataError("target must be BOS-prefixed, EOS-terminated, with >= 1 token")


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").lower() for line in fh]


def load_corpus(src_path, tgt_path, features_path=None, annotations_path=None, *,
                src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                index_path=None) -> list[MultimodalExample]:
    """Read a parallel corpus with optional region features and annotations.

    Without ``index_path`` the feature file must hold one block per line.
    Annotation region indices refer to rows of the image's feature block.
    """
    src_lines, tgt_lines = read_lines(src_path), read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(f"line count mismatch: {src_path} has {len(src_lines)}, "
                        f"{tgt_path} has {len(tgt_lines)}")
    store: Optional[FeatureStore] = None
    image_ids: list[Optional[int]] = [None] * len(src_lines)
    if features_path is not None:
        store = read_features(features_path)
        if index_path is not None:
            idx = [line.strip() for line in read_lines(index_path)]
            if len(idx) != len(src_lines):
                raise DataError(f"line count mismatch: {src_path} has {len(src_lines)}, "
                                f"{index_path} has {len(idx)}")
            try:
                image_ids = [int(i) for i in idx]
            except ValueError as err:
                raise DataError(f"{index_path}: image ids must be integers ({err})") from None
        else:
            if len(store) != len(src_lines):
                raise DataError(f"line count mismatch: {src_path} has {len(src_lines)}, "
                                f"{features_path} has {len(store)} feature blocks")
            image_ids = list(range(len(src_lines)))
    annotations = read_annotations(annotations_path) if annotations_path is not None else {}
    for ex in annotations:
        if not 0 <= ex < len(src_lines):
            raise DataError(f"annotation for example {ex} but corpus has {len(src_lines)} lines")
    out = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        src = src_vocab.encode(s)
        tgt = tgt_vocab.encode(t, bos=True)
        regions = store.get(image_ids[i]) if store is not None else None
        ann = annotations.get(i)
        align = None
        if ann is not None:
            if ann.tokens != s.split():
                raise DataError(f"annotation tokens for example {i} do not match the source line")
            if regions is None:
                raise DataError("annotations need region features")
            align = build_alignment_matrix(ann, len(src), regions.num_regions)
        out.append(MultimodalExample(src, tgt, image_ids[i], regions, align, ann))
    log.info("loaded %d examples (%d annotated) from %s", len(out), len(annotations), src_path)
    return out


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray                          # [B, N] padded ids
    tgt: np.ndarray                          # [B, T] padded ids (BOS ... EOS)
    src_lens: np.ndarray
    indices: np.ndarray                      # example indices in the dataset
    regions: Optional[np.ndarray] = None     # [B, R, D_v]
    region_mask: Optional[np.ndarray] = None # [B, R]
    alignments: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.src.shape[0]


def _trim_alignment(align: Optional[AlignmentMatrix], n: int) -> Optional[AlignmentMatrix]:
    if align is None or align.matrix.shape[1] <= n:
        return align
    return AlignmentMatrix(align.matrix[:, :n], align.annotated_columns[:n])


def collate(examples: Sequence[MultimodalExample], pairs=None, indices=None) -> Batch:
    """Pad a list of examples; ``pairs`` optionally overrides (src, tgt) per example."""
    if pairs is None:
        pairs = [(ex.src, ex.tgt) for ex in examples]
    b = len(examples)
    n = max(len(x) for x, _ in pairs)
    t = max(len(y) for _, y in pairs)
    src = np.full((b, n), PAD, dtype=np.int64)
    tgt = np.full((b, t), PAD, dtype=np.int64)
    for i, (x, y) in enumerate(pairs):
        src[i, : len(x)] = x
        tgt[i, : len(y)] = y
    batch = Batch(src, tgt, np.array([len(x) for x, _ in pairs]),
                  np.arange(b) if indices is None else np.asarray(indices))
    if examples and examples[0].regions is not None:
        r = max(ex.regions.num_regions for ex in examples)
        dv = examples[0].regions.features.shape[1]
        regions = np.zeros((b, r, dv))
        mask = np.zeros((b, r), dtype=bool)
        for i, ex in enumerate(examples):
            k = ex.regions.num_regions
            regions[i, :k] = ex.regions.features
            mask[i, :k] = ex.regions.valid_mask
        batch.regions, batch.region_mask = regions, mask
    batch.alignments = [_trim_alignment(ex.alignment, len(x))
                        for ex, (x, _) in zip(examples, pairs)]
    return batch


def batch_iterator(dataset: Sequence[MultimodalExample], batch_size: int, shuffle: bool = False,
                   seed: int = 0, epoch: int = 0,
                   transform: Optional[Callable] = None) -> Iterator[Batch]:
    """Yield padded batches covering every example exactly once.

    The shuffle order depends only on ``(seed, epoch)``. ``transform`` maps
    a list of ``(src, tgt)`` pairs to a new list (used for prefix training).
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        exs = [dataset[i] for i in idx]
        pairs = [(ex.src, ex.tgt) for ex in exs]
        if transform is not None:
            pairs = transform(pairs)
        yield collate(exs, pairs, idx)


# ---------------------------------------------------------------------------
# synthetic grounding corpus


@dataclass
class SyntheticCorpusSpec:
    """Desk-scale corpus where some nouns can only be translated by looking.

    Every sentence mentions 1..``max_mentions`` objects of the paired image.
    Each noun category is ambiguous with probability ``ambiguity_rate`` (the
    first ``round(rate * num_categories)`` categories): its translation
    depends on the archetype of its region, which the text never reveals.
    """

    num_fillers: int = 12
    num_categories: int = 8
    num_archetypes: int = 4
    min_len: int = 4
    max_len: int = 8
    max_mentions: int = 2
    regions_per_image: int = 4
    detector_regions: int = 6
    region_dim: int = 16
    feature_noise: float = 0.3
    ambiguity_rate: float = 0.5
    train_size: int = 2000
    valid_size: int = 200
    test_size: int = 200
    image_width: float = 600.0
    image_height: float = 400.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError("ambiguity_rate must be in [0, 1]")
        if self.num_archetypes < 2:
            raise ConfigError("num_archetypes must be >= 2")
        if self.regions_per_image > self.num_categories:
            raise ConfigError("regions_per_image cannot exceed num_categories")
        if not 1 <= self.max_mentions <= self.regions_per_image:
            raise ConfigError("max_mentions must be in [1, regions_per_image]")
        if self.min_len < self.max_mentions or self.max_len < self.min_len:
            raise ConfigError("sentence length range must fit the mentions")
        if self.regions_per_image > 6:
            raise ConfigError("at most 6 gold regions per image (2 x 3 layout)")
        if self.detector_regions < self.regions_per_image:
            raise ConfigError("detector_regions must be >= regions_per_image")

    @property
    def num_ambiguous(self) -> int:
        return int(np.floor(self.ambiguity_rate * self.num_categories + 0.5))


@dataclass
class SyntheticSplit:
    src: list[str]
    tgt: list[str]
    gold_features: np.ndarray          # [count, regions_per_image, D_v]
    gold_boxes: np.ndarray
    det_features: np.ndarray           # [count, detector_regions, D_v]
    det_boxes: np.ndarray
    annotations: dict[int, Annotation]
    det_labels: list[list[str]]


@dataclass
class SyntheticDataset:
    spec: SyntheticCorpusSpec
    splits: dict[str, SyntheticSplit]
    ambiguous_target_words: list[str]
    category_vectors: np.ndarray


def _src_noun(c):
    return f"obj{c}"


def _cell_box(rng, cell, spec):
    cw, ch = spec.image_width / 3, spec.image_height / 2
    col, row = cell % 3, cell // 3
    mx, my = rng.uniform(0.05, 0.2, size=2)
    return [col * cw + mx * cw, row * ch + my * ch,
            (col + 1) * cw - mx * cw, (row + 1) * ch - my * ch]


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> SyntheticDataset:
    """Deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    dv = spec.region_dim
    cat_vec = rng.normal(size=(spec.num_categories, dv))
    arch_vec = rng.normal(size=(spec.num_archetypes, dv)) * 1.5
    ambiguous = set(range(spec.num_ambiguous))

    def translate_noun(c, a):
        return f"noun{c}a{a}" if c in ambiguous else f"noun{c}"

    def region_feature(c, a, noise):
        return cat_vec[c] + arch_vec[a] + noise * rng.normal(size=dv)

    splits = {}
    for name, size in (("train", spec.train_size), ("valid", spec.valid_size),
                       ("test", spec.test_size)):
        src_lines, tgt_lines, det_labels = [], [], []
        gf = np.zeros((size, spec.regions_per_image, dv))
        gb = np.zeros((size, spec.regions_per_image, 4))
        df = np.zeros((size, spec.detector_regions, dv))
        db = np.zeros((size, spec.detector_regions, 4))
        anns = {}
        for i in range(size):
            cats = rng.choice(spec.num_categories, size=spec.regions_per_image, replace=False)
            archs = rng.integers(0, spec.num_archetypes, size=spec.regions_per_image)
            cells = rng.choice(6, size=spec.regions_per_image, replace=False)
            regions = []
            for r in range(spec.regions_per_image):
                gf[i, r] = region_feature(cats[r], archs[r], spec.feature_noise)
                gb[i, r] = _cell_box(rng, cells[r], spec)
                regions.append(Region(BoundingBox(*gb[i, r]), _src_noun(cats[r])))
            # detector: same objects with jittered boxes and noisier features, plus clutter
            labels = []
            for r in range(spec.detector_regions):
                if r < spec.regions_per_image:
                    c, a = cats[r], archs[r]
                    w, h = gb[i, r, 2] - gb[i, r, 0], gb[i, r, 3] - gb[i, r, 1]
                    jit = rng.uniform(-0.08, 0.08, size=4) * [w, h, w, h]
                    db[i, r] = gb[i, r] + jit
                else:
                    c = int(rng.integers(spec.num_categories))
                    a = int(rng.integers(spec.num_archetypes))
                    x1 = rng.uniform(0, spec.image_width * 0.8)
                    y1 = rng.uniform(0, spec.image_height * 0.8)
                    db[i, r] = [x1, y1, x1 + rng.uniform(20, 80), y1 + rng.uniform(20, 80)]
                df[i, r] = region_feature(c, a, 2 * spec.feature_noise)
                labels.append(_src_noun(c))
            det_labels.append(labels)
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            mentions = int(rng.integers(1, spec.max_mentions + 1))
            which = rng.choice(spec.regions_per_image, size=mentions, replace=False)
            slots = sorted(rng.choice(length, size=mentions, replace=False).tolist())
            words = [f"fil{f}" for f in rng.integers(0, spec.num_fillers, size=length)]
            trans = [f"ful{w[3:]}" for w in words]
            aligns = []
            for slot, r in zip(slots, which):
                words[slot] = _src_noun(cats[r])
                trans[slot] = translate_noun(cats[r], archs[r])
                aligns.append(([slot], [int(r)]))
            src_lines.append(" ".join(words))
            tgt_lines.append(" ".join(trans))
            anns[i] = Annotation(words, regions, aligns)
        splits[name] = SyntheticSplit(src_lines, tgt_lines, gf, gb, df, db, anns, det_labels)
    amb_words = sorted(translate_noun(c, a) for c in ambiguous for a in range(spec.num_archetypes))
    return SyntheticDataset(spec, splits, amb_words, cat_vec)


def write_synthetic_corpus(ds: SyntheticDataset, out_dir) -> Path:
    """Write every split in the standard corpus/feature/annotation formats.

    Per split: ``.src``/``.tgt`` text, ``.idx`` image ids, ``.gold.feat`` and
    ``.det.feat`` feature files (with boxes), ``.ann.jsonl`` annotations over
    the gold regions, ``.det.labels`` detector labels. ``meta.json`` holds the
    spec and the ambiguous target words; ``embeddings.txt`` a toy label
    embedding table in GloVe text layout.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, sp in ds.splits.items():
        (out / f"{name}.src").write_text("".join(s + "\n" for s in sp.src), encoding="utf-8")
        (out / f"{name}.tgt").write_text("".join(s + "\n" for s in sp.tgt), encoding="utf-8")
        (out / f"{name}.idx").write_text("".join(f"{i}\n" for i in range(len(sp.src))))
        write_features(out / f"{name}.gold.feat", sp.gold_features,
                       [sp.gold_features.shape[1]] * len(sp.src), boxes=sp.gold_boxes)
        write_features(out / f"{name}.det.feat", sp.det_features,
                       [sp.det_features.shape[1]] * len(sp.src), boxes=sp.det_boxes)
        write_annotations(out / f"{name}.ann.jsonl", sp.annotations)
        (out / f"{name}.det.labels").write_text(
            "".join(" ".join(lab) + "\n" for lab in sp.det_labels), encoding="utf-8")
    meta = {"spec": asdict(ds.spec), "ambiguous_target_words": ds.ambiguous_target_words}
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    with open(out / "embeddings.txt", "w", encoding="utf-8") as fh:
        for c, vec in enumerate(ds.category_vectors):
            fh.write(_src_noun(c) + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")
    return out


def load_synthetic_split(root, split: str, feature_source: str = "gold", *,
                         src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[MultimodalExample]:
    """Load one split written by :func:`write_synthetic_corpus`.

    Annotations index gold regions, so they are attached only for the gold
    feature source; detector runs keep the records for box-level evaluation.
    """
    if feature_source not in ("gold", "detector", "none"):
        raise ConfigError(f"unknown feature source {feature_source!r}")
    root = Path(root)
    feats = {"gold": root / f"{split}.gold.feat", "detector": root / f"{split}.det.feat"}
    examples = load_corpus(
        root / f"{split}.src", root / f"{split}.tgt",
        feats.get(feature_source),
        root / f"{split}.ann.jsonl" if feature_source == "gold" else None,
        src_vocab=src_vocab, tgt_vocab=tgt_vocab,
        index_path=root / f"{split}.idx" if feature_source != "none" else None)
    if feature_source == "detector":
        anns = read_annotations(root / f"{split}.ann.jsonl")
        labels = [line.split() for line in read_lines(root / f"{split}.det.labels")]
        for i, ex in enumerate(examples):
            ex.annotation = anns.get(i)
            ex.regions.labels = labels[ex.image_id]
    elif feature_source == "gold":
        for ex in examples:
            if ex.annotation is not None:
                ex.regions.labels = [r.label for r in ex.annotation.regions]
    return examples
