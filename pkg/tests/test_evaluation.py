import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from simmt.errors import ContractError, DataError
from simmt.evaluation import (GroundingRecord, bleu, corpus_token_f1, grounding_records,
                              grounding_score, iou, label_scores, label_similarity,
                              load_embeddings, prefix_accuracy, report_line, token_f1)
from simmt.multimodal import Annotation, BoundingBox, Region


# --- oracles --------------------------------------------------------------

def brute_bleu(hyps, refs, max_n=4):
    """Counts n-grams by scanning every window against every window."""
    matches = [0] * max_n
    totals = [0] * max_n
    for hyp, ref in zip(hyps, refs):
        for n in range(1, max_n + 1):
            hw = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
            rw = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            totals[n - 1] += len(hw)
            for g in set(hw):
                matches[n - 1] += min(hw.count(g), rw.count(g))
    hl, rl = sum(map(len, hyps)), sum(map(len, refs))
    if hl == 0 or matches[0] == 0:
        return 0.0
    precisions = [Fraction(m, t) if m else Fraction(1, t + 1) for m, t in zip(matches, totals)]
    log_p = sum(math.log(float(p)) for p in precisions)
    bp = 1.0 if hl > rl else math.exp(1.0 - rl / hl)
    return bp * math.exp(log_p / max_n)


def raster_iou(a, b, step=0.01):
    """Count grid cell centres inside each box."""
    lo = min(a[0], b[0], a[1], b[1])
    hi = max(a[2], b[2], a[3], b[3])
    c = np.arange(lo + step / 2, hi, step)
    x, y = np.meshgrid(c, c, indexing="ij")
    ina = (x > a[0]) & (x < a[2]) & (y > a[1]) & (y < a[3])
    inb = (x > b[0]) & (x < b[2]) & (y > b[1]) & (y < b[3])
    return (ina & inb).sum() / (ina | inb).sum()


# --- BLEU -----------------------------------------------------------------

def test_bleu_identity_and_repetition_case():
    assert bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d"]]) == 1.0
    hyp, ref = ["the"] * 4, ["the", "cat"]
    assert bleu([hyp], [ref]) == brute_bleu([hyp], [ref])
    # p1 = 1/4 clipped, p2..p4 smoothed to 1/4, 1/3, 1/2; no brevity penalty
    expected = math.exp((math.log(1 / 4) + math.log(1 / 4) + math.log(1 / 3) + math.log(1 / 2)) / 4)
    assert bleu([hyp], [ref]) == pytest.approx(expected, rel=1e-15)


def test_bleu_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(7)
    words = list("abcde")
    for _ in range(20):
        n = int(rng.integers(1, 4))
        hyps = [list(rng.choice(words, rng.integers(0, 9))) for _ in range(n)]
        refs = [list(rng.choice(words, rng.integers(1, 9))) for _ in range(n)]
        assert bleu(hyps, refs) == brute_bleu(hyps, refs)


@given(st.lists(st.tuples(st.lists(st.sampled_from("abc"), max_size=6),
                          st.lists(st.sampled_from("abc"), min_size=1, max_size=6)),
                min_size=1, max_size=4), st.randoms())
def test_bleu_bounds_and_order_invariance(pairs, rnd):
    hyps, refs = map(list, zip(*pairs))
    score = bleu(hyps, refs)
    assert 0.0 <= score <= 1.0
    rnd.shuffle(pairs)
    h2, r2 = map(list, zip(*pairs))
    assert bleu(h2, r2) == pytest.approx(score, rel=1e-12)


def test_bleu_errors_and_empty_hypothesis():
    assert bleu([[]], [["a"]]) == 0.0
    with pytest.raises(DataError):
        bleu([["a"]], [[]])
    with pytest.raises(ContractError):
        bleu([["a"]], [["a"], ["b"]])


def test_token_f1():
    assert token_f1(["a", "b"], ["a", "b"]) == 1.0
    assert token_f1(["a", "b"], ["b", "c", "d", "e"]) == pytest.approx(2 * 0.5 * 0.25 / 0.75)
    assert token_f1([], ["a"]) == 0.0 and token_f1([], []) == 1.0
    assert corpus_token_f1([["a"], ["x"]], [["a"], ["y"]]) == 0.5


# --- prefix accuracy ------------------------------------------------------

def test_prefix_accuracy_hand_cases():
    assert prefix_accuracy([["a", "b"]], [["a", "b"]], 1) == 1.0
    assert prefix_accuracy([["a", "b"]], [["a", "c"]], 2) == 1.0
    assert prefix_accuracy([["x", "y"]], [["a", "b"]], 2) == 0.0
    # positions beyond either length never match
    assert prefix_accuracy([["a"], ["b", "c", "d"]], [["a", "z"], ["b", "c"]], 3) == 1.5
    assert prefix_accuracy([["a", "b", "c"]], [["a", "x", "c"]], math.inf) == 2.0
    with pytest.raises(ContractError):
        prefix_accuracy([["a"]], [["a"]], 0)


@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(0, 1000))
def test_prefix_accuracy_inf_is_positional_matches(lens, seed):
    rng = np.random.default_rng(seed)
    hyps = [list(rng.choice(list("ab"), n)) for n in lens]
    refs = [list(rng.choice(list("ab"), n)) for n in lens]
    expected = np.mean([sum(h == r for h, r in zip(hh, rr)) for hh, rr in zip(hyps, refs)])
    assert prefix_accuracy(hyps, refs, math.inf) == pytest.approx(expected)
    assert prefix_accuracy(hyps, refs, 1) <= 1.0


# --- IoU ------------------------------------------------------------------

def test_iou_examples_against_raster():
    assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0      # touching edges
    v = iou([0, 0, 2, 2], [1, 1, 3, 3])
    assert abs(v - 1 / 7) < 1e-12
    assert abs(v - raster_iou([0, 0, 2, 2], [1, 1, 3, 3])) < 1e-6
    with pytest.raises(DataError):
        iou([0, 0, 0, 1], [0, 0, 1, 1])


def test_iou_random_boxes_against_raster():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = np.sort(rng.integers(0, 40, (2, 2)) / 10, axis=0).T.reshape(-1)[[0, 2, 1, 3]]
        b = np.sort(rng.integers(0, 40, (2, 2)) / 10, axis=0).T.reshape(-1)[[0, 2, 1, 3]]
        if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
            continue
        assert abs(iou(a, b) - raster_iou(a, b, 0.05)) < 1e-6


@given(*[st.floats(0, 10) for _ in range(4)], *[st.floats(0.1, 5) for _ in range(4)])
def test_iou_symmetric_and_bounded(x1, y1, x2, y2, w1, h1, w2, h2):
    a, b = [x1, y1, x1 + w1, y1 + h1], [x2, y2, x2 + w2, y2 + h2]
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0 + 1e-12
    assert iou(a, a) == pytest.approx(1.0)


# --- grounding ------------------------------------------------------------

def box(*c):
    return BoundingBox(*map(float, c))


def test_grounding_max_rule_and_threshold():
    recs = [GroundingRecord(0, box(0, 0, 1, 1), [box(5, 5, 6, 6), box(0, 0, 1, 1)]),
            GroundingRecord(0, box(0, 0, 2, 2), [box(1, 1, 3, 3)])]
    out = grounding_score(recs, 0.5)
    assert out["count"] == 2
    assert out["mean_iou"] == pytest.approx((1 + 1 / 7) / 2)
    assert out["accuracy_at_threshold"] == 0.5
    recs[0].gold_boxes.reverse()
    assert grounding_score(recs)["mean_iou"] == out["mean_iou"]
    with pytest.raises(ContractError):
        grounding_score([])
    with pytest.raises(DataError):
        GroundingRecord(0, box(0, 0, 1, 1), [])


def test_grounding_records_from_attention():
    regions = [Region(box(0, 0, 1, 1), "dog"), Region(box(2, 2, 3, 3), "cat")]
    ann = Annotation(["a", "dog", "cat"], regions, [([1], [0]), ([2], [1])])
    att = np.array([[0.5, 0.5, 0.0], [0.1, 0.3, 0.6], [0.4, 0.4, 0.2]])
    boxes = [box(0, 0, 1, 1), box(2, 2, 3, 3), box(9, 9, 10, 10)]
    recs = grounding_records(att, ann, boxes, ["dog", "cat", "hat"],
                             valid_mask=np.array([True, True, False]))
    assert [r.predicted_index for r in recs] == [1, 0]     # masked max skipped; tie -> lowest
    assert recs[0].peak == 0.3 and recs[1].gold_label == "cat"
    assert grounding_score(recs)["mean_iou"] == 0.0


# --- labels ---------------------------------------------------------------

def test_label_similarity(tmp_path):
    (tmp_path / "e.txt").write_text("dog 1 2 0\ncat 2 1 0\nbox 0 0 3\n")
    emb = load_embeddings(tmp_path / "e.txt")
    same = label_similarity("Dog", "dog", emb)
    assert same.exact and same.cosine == pytest.approx(1.0)
    assert label_similarity("dog", "cat", emb).cosine == pytest.approx(4 / 5)
    assert label_similarity("dog", "box", emb).cosine == 0.0
    assert label_similarity("dog", "emu", emb).cosine is None
    scores = label_scores([("dog", "dog"), ("dog", "emu")], emb)
    assert scores["cosine"] == pytest.approx(1.0) and scores["missing_embeddings"] == 1
    assert scores["exact_match"] == 0.5


def test_embedding_file_errors(tmp_path):
    (tmp_path / "e.txt").write_text("dog 1 2\ncat 1\n")
    with pytest.raises(DataError, match=":2"):
        load_embeddings(tmp_path / "e.txt")
    (tmp_path / "f.txt").write_text("dog 1 x\n")
    with pytest.raises(DataError):
        load_embeddings(tmp_path / "f.txt")


def test_report_line_is_json():
    import json
    rec = json.loads(report_line("bleu", 0.5, 3, k=1))
    assert rec == {"metric": "bleu", "value": 0.5, "count": 3, "config": {"k": 1}}
