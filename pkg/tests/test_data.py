from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from simmt.data import (SPECIALS, MultimodalExample, SyntheticCorpusSpec, Vocabulary,
                        batch_iterator, build_vocab, collate, generate_synthetic_corpus,
                        load_corpus, load_synthetic_split, write_synthetic_corpus)
from simmt.errors import ConfigError, DataError
from simmt.multimodal import Annotation, BoundingBox, Region, write_annotations, write_features
from simmt.transformer import BOS, EOS, PAD, UNK

SMALL = dict(train_size=60, valid_size=10, test_size=10)


# --- vocabulary -----------------------------------------------------------

def test_vocab_order_and_round_trip():
    v = build_vocab(["b a b", "c b a"])
    assert v.to_list() == list(SPECIALS) + ["b", "a", "c"]
    assert v.encode("A b zzz") == [5, 4, UNK, EOS]
    assert v.encode(["b"], bos=True) == [BOS, 4, EOS]
    assert v.decode([BOS, 4, 5, PAD, EOS, 6]) == ["b", "a"]
    assert Vocabulary.from_list(v.to_list()) == v


def test_vocab_min_freq_and_errors():
    assert "c" not in build_vocab(["a a c"], min_freq=2)
    with pytest.raises(DataError):
        build_vocab([])
    with pytest.raises(DataError):
        Vocabulary.from_list(["a", "b"])
    with pytest.raises(DataError):
        Vocabulary(["a", "a"])


def test_example_validation():
    with pytest.raises(DataError):
        MultimodalExample([], [BOS, 4, EOS])
    with pytest.raises(DataError):
        MultimodalExample([4, EOS], [4, EOS])


# --- corpus files ---------------------------------------------------------

@pytest.fixture
def corpus(tmp_path):
    (tmp_path / "s.txt").write_text("a dog runs\nthe cat\n")
    (tmp_path / "t.txt").write_text("un chien court\nle chat\n")
    return tmp_path


def vocabs(corpus):
    return dict(src_vocab=build_vocab(["a dog runs", "the cat"]),
                tgt_vocab=build_vocab(["un chien court", "le chat"]))


def test_load_text_corpus(corpus):
    exs = load_corpus(corpus / "s.txt", corpus / "t.txt", **vocabs(corpus))
    assert len(exs) == 2 and exs[1].src[-1] == EOS and exs[1].tgt[0] == BOS
    assert exs[0].regions is None


def test_load_with_features_and_annotations(corpus, rng):
    write_features(corpus / "f.bin", rng.normal(size=(1, 3, 4)), [2])
    (corpus / "i.txt").write_text("0\n0\n")
    write_annotations(corpus / "a.jsonl", {0: Annotation(
        ["a", "dog", "runs"], [Region(BoundingBox(0, 0, 1, 1))] * 2, [([1], [0, 1])])})
    exs = load_corpus(corpus / "s.txt", corpus / "t.txt", corpus / "f.bin", corpus / "a.jsonl",
                      index_path=corpus / "i.txt", **vocabs(corpus))
    assert exs[1].regions.num_regions == 2
    np.testing.assert_array_equal(exs[0].alignment.matrix[:, 1], [0.5, 0.5])
    assert exs[0].alignment.matrix.shape == (2, 4)     # EOS column included
    assert exs[1].alignment is None


def test_load_corpus_errors(corpus, rng):
    v = vocabs(corpus)
    (corpus / "short.txt").write_text("x\n")
    with pytest.raises(DataError, match="line count"):
        load_corpus(corpus / "s.txt", corpus / "short.txt", **v)
    write_features(corpus / "f.bin", rng.normal(size=(1, 2, 4)), [2])
    with pytest.raises(DataError, match="feature blocks"):
        load_corpus(corpus / "s.txt", corpus / "t.txt", corpus / "f.bin", **v)
    (corpus / "i.txt").write_text("0\n5\n")
    with pytest.raises(DataError, match="image id 5"):
        load_corpus(corpus / "s.txt", corpus / "t.txt", corpus / "f.bin",
                    index_path=corpus / "i.txt", **v)
    (corpus / "i.txt").write_text("0\n0\n")
    write_annotations(corpus / "a.jsonl", {1: Annotation(["a", "cat"], [], [])})
    with pytest.raises(DataError, match="do not match"):
        load_corpus(corpus / "s.txt", corpus / "t.txt", corpus / "f.bin", corpus / "a.jsonl",
                    index_path=corpus / "i.txt", **v)


# --- batching -------------------------------------------------------------

def toy_dataset(n, rng):
    return [MultimodalExample(np.r_[rng.integers(4, 9, rng.integers(0, 5)), EOS],
                              np.r_[BOS, rng.integers(4, 9, rng.integers(1, 5)), EOS])
            for _ in range(n)]


@given(st.integers(1, 30), st.integers(1, 8), st.booleans(), st.integers(0, 100))
def test_batches_cover_every_example_once(n, bs, shuffle, seed):
    data = toy_dataset(n, np.random.default_rng(seed))
    batches = list(batch_iterator(data, bs, shuffle=shuffle, seed=seed, epoch=1))
    idx = np.concatenate([b.indices for b in batches])
    assert sorted(idx.tolist()) == list(range(n))
    assert all(len(b) <= bs for b in batches)
    for b in batches:
        for row, i in enumerate(b.indices):
            ex = data[i]
            assert b.src_lens[row] == len(ex.src)
            np.testing.assert_array_equal(b.src[row, :len(ex.src)], ex.src)
            assert (b.src[row, len(ex.src):] == PAD).all()
            np.testing.assert_array_equal(b.tgt[row, :len(ex.tgt)], ex.tgt)


def test_shuffle_depends_only_on_seed_and_epoch(rng):
    data = toy_dataset(20, rng)
    order = lambda s, e: np.concatenate([b.indices for b in batch_iterator(data, 3, True, s, e)])
    np.testing.assert_array_equal(order(1, 2), order(1, 2))
    assert not np.array_equal(order(1, 2), order(1, 3))
    with pytest.raises(ConfigError):
        next(batch_iterator(data, 0))


def test_collate_pads_regions(rng):
    from simmt.multimodal import RegionFeatures
    a = MultimodalExample([4, EOS], [BOS, 4, EOS], 0, RegionFeatures(np.ones((1, 3)), [True]))
    b = MultimodalExample([4, EOS], [BOS, 4, EOS], 1,
                          RegionFeatures(np.ones((3, 3)), [True] * 3))
    batch = collate([a, b])
    assert batch.regions.shape == (2, 3, 3)
    np.testing.assert_array_equal(batch.region_mask, [[1, 0, 0], [1, 1, 1]])


# --- synthetic corpus -----------------------------------------------------

def test_synthetic_generation_is_deterministic():
    a = generate_synthetic_corpus(SyntheticCorpusSpec(**SMALL))
    b = generate_synthetic_corpus(SyntheticCorpusSpec(**SMALL))
    assert a.splits["train"].tgt == b.splits["train"].tgt
    np.testing.assert_array_equal(a.splits["test"].det_features, b.splits["test"].det_features)
    c = generate_synthetic_corpus(SyntheticCorpusSpec(seed=1, **SMALL))
    assert a.splits["train"].src != c.splits["train"].src


def test_synthetic_invariants():
    spec = SyntheticCorpusSpec(**SMALL)
    ds = generate_synthetic_corpus(spec)
    assert spec.num_ambiguous == 4
    assert len(ds.ambiguous_target_words) == 4 * spec.num_archetypes
    for sp in ds.splits.values():
        for i, (s, t) in enumerate(zip(sp.src, sp.tgt)):
            sw, tw = s.split(), t.split()
            assert len(sw) == len(tw) and spec.min_len <= len(sw) <= spec.max_len
            ann = sp.annotations[i]
            assert ann.tokens == sw
            for (tok,), (reg,) in ann.alignments:
                assert sw[tok] == ann.regions[reg].label
                assert tw[tok].startswith("noun" + sw[tok][3:])


def test_ambiguous_nouns_are_not_predictable_from_text():
    """The archetype suffix of an ambiguous noun is independent of the sentence,
    so a text-only model is held near 1/num_archetypes on those tokens."""
    spec = SyntheticCorpusSpec(train_size=4000, valid_size=1, test_size=1)
    ds = generate_synthetic_corpus(spec)
    amb = set(ds.ambiguous_target_words)
    counts = defaultdict(Counter)
    for s, t in zip(ds.splits["train"].src, ds.splits["train"].tgt):
        for sw, tw in zip(s.split(), t.split()):
            if tw in amb:
                counts[sw][tw] += 1
    for c in counts.values():
        best = max(c.values()) / sum(c.values())
        assert best < 1 / spec.num_archetypes + 0.06


def test_zero_ambiguity_makes_translation_word_for_word():
    ds = generate_synthetic_corpus(SyntheticCorpusSpec(ambiguity_rate=0.0, **SMALL))
    assert ds.ambiguous_target_words == []
    mapping = {}
    for s, t in zip(ds.splits["train"].src, ds.splits["train"].tgt):
        for sw, tw in zip(s.split(), t.split()):
            assert mapping.setdefault(sw, tw) == tw


@pytest.mark.parametrize("kw", [dict(ambiguity_rate=1.5), dict(num_archetypes=1),
                                dict(regions_per_image=7, num_categories=8),
                                dict(detector_regions=2)])
def test_synthetic_spec_validation(kw):
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec(**kw)


@pytest.mark.parametrize("source", ["gold", "detector", "none"])
def test_synthetic_files_load(tmp_path, source):
    ds = generate_synthetic_corpus(SyntheticCorpusSpec(**SMALL))
    write_synthetic_corpus(ds, tmp_path)
    sv = build_vocab(ds.splits["train"].src)
    tv = build_vocab(ds.splits["train"].tgt)
    exs = load_synthetic_split(tmp_path, "valid", source, src_vocab=sv, tgt_vocab=tv)
    assert len(exs) == 10
    if source == "none":
        assert exs[0].regions is None
        return
    assert exs[0].annotation is not None and exs[0].regions.labels is not None
    assert (exs[0].alignment is not None) == (source == "gold")
    r = ds.spec.regions_per_image if source == "gold" else ds.spec.detector_regions
    assert exs[0].regions.num_regions == r
    with pytest.raises(ConfigError):
        load_synthetic_split(tmp_path, "valid", "camera", src_vocab=sv, tgt_vocab=tv)
