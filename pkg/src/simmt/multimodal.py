"""Region features, the cross-modal interaction block and attention supervision.

File formats
------------
Feature file (binary, little endian)::

    b"SMMTFEAT"  magic
    6 x uint32   version=1, count, r_max, d_v, bits (32 or 64), flags
    payload      count * r_max * d_v floats (row-major, 32- or 64-bit)
    valid        count x uint32, number of leading valid regions per image
    boxes        count * r_max * 4 float64, only when flags & 1

Annotation file: JSON lines, one record per annotated example::

    {"example": 3, "tokens": ["a", "girl", ...],
     "regions": [{"box": [x1, y1, x2, y2], "label": "girl"}, ...],
     "alignments": [{"token_indices": [0, 1], "region_indices": [0]}, ...]}

Examples without a record carry no alignment and are skipped by the loss.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, DimensionError
from .numerics import Tensor
from .transformer import linear, multi_head_attention

FEATURE_MAGIC = b"SMMTFEAT"
FEATURE_VERSION = 1
SUPERVISION_MODES = ("none", "scratch", "finetune")


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DataError(f"degenerate bounding box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class RegionFeatures:
    features: np.ndarray                       # [R, D_v]
    valid_mask: np.ndarray                     # [R] bool
    boxes: Optional[list[BoundingBox]] = None
    labels: Optional[list[str]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"region features must be [R>=1, D_v], got {self.features.shape}")
        if self.valid_mask.shape != (self.features.shape[0],):
            raise DataError("valid_mask length does not match region count")

    @property
    def num_regions(self) -> int:
        return self.features.shape[0]


@dataclass
class AlignmentMatrix:
    """Gold region-word distribution ``M[R, N]`` plus annotated-column mask."""

    matrix: np.ndarray
    annotated_columns: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.matrix.shape

    def any_annotated(self) -> bool:
        return bool(self.annotated_columns.any())


@dataclass
class SupervisionConfig:
    alpha: float = 1.0
    beta: float = 0.0
    mode: str = "none"

    def __post_init__(self):
        if self.mode not in SUPERVISION_MODES:
            raise ConfigError(f"supervision mode must be one of {SUPERVISION_MODES}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.mode == "none" and self.beta != 0:
            raise ConfigError("supervision mode 'none' requires beta = 0")


@dataclass
class Region:
    box: BoundingBox
    label: Optional[str] = None


@dataclass
class Annotation:
    tokens: list[str]
    regions: list[Region]
    alignments: list[tuple[list[int], list[int]]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# model pieces


def project_regions(v, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Map ``[..., R, D_v]`` region features into the model dimension."""
    v = nx.as_tensor(v)
    if v.shape[-1] != w.shape[0]:
        raise DimensionError(f"region dim {v.shape[-1]} vs projection {w.shape}")
    return linear(v, w, b)


def cross_modal_interaction(h_text: Tensor, v_proj: Tensor, valid_mask, params: dict):
    """Single-head attention from words to regions, residual add, layer norm.

    Returns ``(h_mm, attn)`` where ``attn[b, j, r]`` is the weight word ``j``
    puts on region ``r``; invalid regions get exactly 0.
    """
    squeeze = h_text.ndim == 2
    if squeeze:
        h_text = h_text.reshape(1, *h_text.shape)
        v_proj = v_proj.reshape(1, *v_proj.shape)
    valid = np.asarray(valid_mask, dtype=bool).reshape(v_proj.shape[0], v_proj.shape[1])
    if not valid.any(axis=1).all():
        raise DataError("cross-modal interaction needs at least one valid region per example")
    if h_text.shape[-1] != v_proj.shape[-1]:
        raise DimensionError(f"text dim {h_text.shape[-1]} vs region dim {v_proj.shape[-1]}")
    out, weights = multi_head_attention(h_text, v_proj, v_proj, valid[:, None, :], params,
                                        "cmi", heads=1)
    h_mm = nx.layer_norm(h_text + out, params["cmi.ln.g"], params["cmi.ln.b"])
    b, _, n, r = weights.shape
    attn = weights.reshape(b, n, r)
    if squeeze:
        return h_mm.reshape(*h_mm.shape[1:]), attn.reshape(n, r)
    return h_mm, attn


def build_alignment_matrix(annotation, num_tokens: int, num_regions: int) -> AlignmentMatrix:
    """Gold distribution: word ``j`` linked to ``k`` regions gets ``1/k`` on each.

    ``annotation`` is an :class:`Annotation` or a list of
    ``(token_indices, region_indices)`` pairs.
    """
    pairs = annotation.alignments if isinstance(annotation, Annotation) else annotation
    links: dict[int, set[int]] = {}
    for tokens, regions in pairs:
        for j in tokens:
            if not 0 <= j < num_tokens:
                raise DataError(f"token index {j} out of range for {num_tokens} tokens")
            for r in regions:
                if not 0 <= r < num_regions:
                    raise DataError(f"region index {r} out of range for {num_regions} regions")
                links.setdefault(j, set()).add(r)
    m = np.zeros((num_regions, num_tokens))
    annotated = np.zeros(num_tokens, dtype=bool)
    for j, regs in links.items():
        if regs:
            m[sorted(regs), j] = 1.0 / len(regs)
            annotated[j] = True
    return AlignmentMatrix(matrix=m, annotated_columns=annotated)


def alignment_loss(attn: Tensor, gold) -> Tensor:
    """Mean KL(M[:, j] || attn[j]) over annotated words, then over annotated sentences.

    ``attn`` is ``[N, R]`` with ``gold`` an AlignmentMatrix, or ``[B, N, R]``
    with ``gold`` a sequence (entries may be None). Returns 0, with zero
    gradient, when nothing is annotated.
    """
    attn = nx.as_tensor(attn)
    if attn.ndim == 2:
        attn = attn.reshape(1, *attn.shape)
        gold = [gold]
    b, n, r = attn.shape
    if len(gold) != b:
        raise DimensionError(f"{len(gold)} alignment matrices for a batch of {b}")
    target = np.zeros((b, n, r))
    annotated = np.zeros((b, n), dtype=bool)
    for i, g in enumerate(gold):
        if g is None or not g.any_annotated():
            continue
        gr, gn = g.matrix.shape
        if gn > n or gr > r:
            raise DimensionError(f"alignment matrix {g.matrix.shape} exceeds attention {(n, r)}")
        target[i, :gn, :gr] = g.matrix.T
        annotated[i, :gn] = g.annotated_columns
    sentences = annotated.any(axis=1)
    if not sentences.any():
        return nx.tsum(attn * 0.0)
    rows = np.nonzero(annotated)
    per_word = nx.kl_divergence(target[rows], nx.index(attn, rows))
    weight = 1.0 / (annotated.sum(axis=1)[rows[0]] * sentences.sum())
    return nx.tsum(per_word * weight)


def multitask_loss(l_mt, l_align, cfg: SupervisionConfig):
    return cfg.alpha * l_mt + cfg.beta * l_align


# ---------------------------------------------------------------------------
# files


@dataclass
class FeatureStore:
    """All region blocks of one feature file, indexed by image id (row)."""

    features: np.ndarray          # [count, r_max, d_v] float64
    valid_counts: np.ndarray      # [count]
    boxes: Optional[np.ndarray] = None   # [count, r_max, 4]

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def region_dim(self) -> int:
        return self.features.shape[2]

    def get(self, image_id: int) -> RegionFeatures:
        if not 0 <= image_id < len(self):
            raise DataError(f"image id {image_id} not in feature file of {len(self)} images")
        n = int(self.valid_counts[image_id])
        boxes = None
        if self.boxes is not None:
            boxes = [BoundingBox(*map(float, bx)) for bx in self.boxes[image_id, :n]]
        return RegionFeatures(self.features[image_id, :n], np.ones(n, dtype=bool), boxes=boxes)


def write_features(path, features: np.ndarray, valid_counts: Sequence[int],
                   boxes: Optional[np.ndarray] = None, bits: int = 64) -> None:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise DataError(f"features must be [count, r_max, d_v], got {features.shape}")
    if bits not in (32, 64):
        raise DataError("bits must be 32 or 64")
    count, r_max, d_v = features.shape
    valid = np.asarray(valid_counts, dtype="<u4")
    if valid.shape != (count,) or (valid < 1).any() or (valid > r_max).any():
        raise DataError("valid counts must be in [1, r_max] for every image")
    flags = 1 if boxes is not None else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<6I", FEATURE_VERSION, count, r_max, d_v, bits, flags))
        fh.write(features.astype("<f8" if bits == 64 else "<f4").tobytes())
        fh.write(valid.tobytes())
        if boxes is not None:
            fh.write(np.asarray(boxes, dtype="<f8").reshape(count, r_max, 4).tobytes())


def read_features(path) -> FeatureStore:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file")
    version, count, r_max, d_v, bits, flags = struct.unpack_from("<6I", raw, 8)
    if version != FEATURE_VERSION or bits not in (32, 64):
        raise DataError(f"{path}: unsupported feature file (version {version}, {bits}-bit)")
    off = 8 + 24
    n = count * r_max * d_v
    width = bits // 8
    dtype = "<f8" if bits == 64 else "<f4"
    expected = off + n * width + 4 * count + (count * r_max * 32 if flags & 1 else 0)
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    feats = np.frombuffer(raw, dtype=dtype, count=n, offset=off).astype(np.float64)
    off += n * width
    valid = np.frombuffer(raw, dtype="<u4", count=count, offset=off).astype(np.int64)
    off += 4 * count
    boxes = None
    if flags & 1:
        boxes = np.frombuffer(raw, dtype="<f8", count=count * r_max * 4, offset=off)
        boxes = boxes.reshape(count, r_max, 4).copy()
    return FeatureStore(feats.reshape(count, r_max, d_v), valid, boxes)


def annotation_to_record(example: int, ann: Annotation) -> dict:
    return {
        "example": example,
        "tokens": list(ann.tokens),
        "regions": [{"box": r.box.as_list(), "label": r.label} for r in ann.regions],
        "alignments": [{"token_indices": list(t), "region_indices": list(r)}
                       for t, r in ann.alignments],
    }


def write_annotations(path, annotations: dict[int, Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in sorted(annotations):
            fh.write(json.dumps(annotation_to_record(ex, annotations[ex])) + "\n")


def read_annotations(path) -> dict[int, Annotation]:
    out: dict[int, Annotation] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                regions = [Region(BoundingBox(*map(float, r["box"])), r.get("label"))
                           for r in rec["regions"]]
                aligns = [(list(a["token_indices"]), list(a["region_indices"]))
                          for a in rec["alignments"]]
                out[int(rec["example"])] = Annotation(list(rec["tokens"]), regions, aligns)
            except (KeyError, TypeError, ValueError) as err:
                if isinstance(err, DataError):
                    raise DataError(f"{path}:{lineno}: {err}") from None
                raise DataError(f"{path}:{lineno}: malformed annotation record ({err})") from None
    return out
