import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtnat.data import (
    BOS,
    EOS,
    PAD,
    BpeModel,
    ConfigError,
    ParallelCorpus,
    ToyTaskSpec,
    Vocabulary,
    apply_bpe,
    build_batches,
    build_tokenizer,
    generate_toy_corpus,
    learn_bpe,
    remove_bpe,
)

words = st.text(alphabet="abcdeéxyz", min_size=1, max_size=8)
sentences = st.lists(words, min_size=1, max_size=6).map(" ".join)


# ---- toy tasks


def test_copy_task():
    assert ToyTaskSpec("copy").translate("a b c".split()) == ["a", "b", "c"]


def test_reverse_task():
    assert ToyTaskSpec("reverse").translate("a b c".split()) == ["c", "b", "a"]


def test_lexicon_swaps_first_two_nouns():
    spec = ToyTaskSpec("lexicon", lexicon={"a": "x", "b": "y"}, nouns=frozenset({"a", "b"}))
    assert spec.translate(["a", "b"]) == ["y", "x"]


def test_lexicon_swaps_non_overlapping_pairs_left_to_right():
    lex = {w: w.upper() for w in "abcd"}
    spec = ToyTaskSpec("lexicon", lexicon=lex, nouns=frozenset("abc"))
    assert spec.translate(list("abcd")) == ["B", "A", "C", "D"]


def test_lexicon_must_be_bijective():
    with pytest.raises(ConfigError, match="bijective"):
        ToyTaskSpec("lexicon", lexicon={"a": "x", "b": "x"})


def test_generated_lexicon_is_total_and_bijective():
    spec = ToyTaskSpec("lexicon", vocab_size=40, seed=3)
    assert len(spec.lexicon) == 40 and len(set(spec.lexicon.values())) == 40
    assert set(spec.source_words()) == set(spec.lexicon)


def test_corpus_is_deterministic():
    spec = ToyTaskSpec("lexicon", seed=1)
    a, b = generate_toy_corpus(spec, 50), generate_toy_corpus(spec, 50)
    assert a.pairs == b.pairs
    assert generate_toy_corpus(spec, 50, seed=9).pairs != a.pairs


def test_corpus_targets_follow_rule_and_lengths_in_range():
    spec = ToyTaskSpec("lexicon", min_len=2, max_len=5, seed=4)
    corpus = generate_toy_corpus(spec, 200)
    for s, t in corpus.pairs:
        assert 2 <= len(s.split()) <= 5
        assert t.split() == spec.translate(s.split())


def test_corpus_rejects_empty_sides():
    with pytest.raises(ValueError):
        ParallelCorpus(["a"], [" "])
    with pytest.raises(ValueError):
        ParallelCorpus([], [])


def test_corpus_file_round_trip(tmp_path):
    corpus = generate_toy_corpus(ToyTaskSpec("reverse"), 20)
    corpus.save(tmp_path / "c")
    assert (tmp_path / "c.src").read_text(encoding="utf-8").count("\n") == 20
    assert ParallelCorpus.load(tmp_path / "c").pairs == corpus.pairs


# ---- BPE


def test_zero_merges_is_character_level():
    model = learn_bpe(["low lower"], 0)
    assert apply_bpe(model, "low") == ["l", "o", "w</w>"]


def test_first_merge_counts_pairs():
    # hand count over symbols l o w</w> (x2) and l o w e r</w>: (l, o) occurs 3 times
    assert learn_bpe(["low", "low", "lower"], 1).merges == [("l", "o")]


def test_ties_broken_lexicographically():
    # every adjacent pair occurs once; the smallest pair wins
    assert learn_bpe(["ba dc"], 1).merges == [("b", "a</w>")]


def test_fully_merged_training_word_is_one_token():
    model = learn_bpe(["lower lower newer"], 50)
    assert apply_bpe(model, "lower") == ["lower</w>"]


def test_unknown_characters_pass_through():
    model = learn_bpe(["abab"], 5)
    assert apply_bpe(model, "q") == ["q</w>"]


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        learn_bpe(["  "], 3)


def test_bpe_file_round_trip(tmp_path):
    model = learn_bpe(["the cat sat on the mat"], 12)
    model.save(tmp_path / "codes")
    assert BpeModel.load(tmp_path / "codes").merges == model.merges


@settings(max_examples=80, deadline=None)
@given(st.lists(sentences, min_size=1, max_size=6), st.integers(0, 30), sentences)
def test_bpe_round_trip(corpus, merges, probe):
    model = learn_bpe(corpus, merges)
    for s in corpus + [probe]:
        assert remove_bpe(apply_bpe(model, s)) == " ".join(s.split())
        once = remove_bpe(apply_bpe(model, s))
        assert remove_bpe(apply_bpe(model, once)) == once


# ---- vocabulary


def test_reserved_ids_fixed():
    v = Vocabulary(["x", "y"])
    assert [v.stoi[t] for t in (PAD, BOS, EOS)] == [0, 1, 2]
    assert v.mask == 4 and len(v) == 7
    assert Vocabulary(["x"], with_mask=False).mask is None


def test_vocabulary_file_round_trip(tmp_path):
    v = Vocabulary.build([["b", "a", "b"]])
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "<pad>\t0" and lines[5] == "b\t5"
    assert Vocabulary.load(tmp_path / "vocab.txt").itos == v.itos


# ---- batches


def _tiny_vocab():
    return Vocabulary(["a", "b", "c", "d", "e"])


def test_single_pair_batch():
    vocab = _tiny_vocab()
    batches, skipped = build_batches(ParallelCorpus(["a b"], ["c d e"]), vocab, 1, 10, seed=0)
    assert skipped == 0 and len(batches) == 1
    b = batches[0]
    assert not b.src_pad.any() and not b.tgt_pad.any()
    assert b.at_in[0, 0] == vocab.bos and b.at_out[0, -1] == vocab.eos
    assert b.lengths.tolist() == [3]


def test_padding_marks_exactly_pad_positions():
    vocab = _tiny_vocab()
    corpus = ParallelCorpus(["a b c", "a b c d e"], ["a", "b"])
    (b,), _ = build_batches(corpus, vocab, 2, 10, seed=0)
    short = int(np.argmin(b.src_lengths))
    assert b.src_pad[short].sum() == 2
    np.testing.assert_array_equal(b.src_pad, b.src == vocab.pad)


def test_same_seed_same_order():
    corpus = generate_toy_corpus(ToyTaskSpec("copy", vocab_size=5, seed=0), 40)
    bpe, vocab = build_tokenizer(corpus, 10)
    a, _ = build_batches(corpus, vocab, 8, 64, seed=3, bpe=bpe)
    b, _ = build_batches(corpus, vocab, 8, 64, seed=3, bpe=bpe)
    assert all(np.array_equal(x.src, y.src) for x, y in zip(a, b))


def test_overlong_pairs_are_counted_not_fatal():
    vocab = _tiny_vocab()
    corpus = ParallelCorpus(["a b c d e", "a"], ["a", "b"])
    batches, skipped = build_batches(corpus, vocab, 4, 3, seed=0)
    assert skipped == 1 and batches[0].size == 1


def test_target_length_budget_includes_eos():
    vocab = _tiny_vocab()
    corpus = ParallelCorpus(["a", "a"], ["a b c", "a b"])
    batches, skipped = build_batches(corpus, vocab, 4, 3, seed=0)
    assert skipped == 1 and batches[0].at_in.shape[1] == 3


def test_missing_reserved_tokens_is_an_error():
    vocab = _tiny_vocab()
    vocab.stoi.pop(EOS)
    with pytest.raises(ValueError, match="reserved"):
        build_batches(ParallelCorpus(["a"], ["b"]), vocab, 1, 5, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_mask_and_lengths_invariants(seed, batch_size):
    corpus = generate_toy_corpus(ToyTaskSpec("lexicon", vocab_size=8, seed=0), 30, seed=seed)
    bpe, vocab = build_tokenizer(corpus, 20)
    batches, _ = build_batches(corpus, vocab, batch_size, 64, seed=seed, bpe=bpe)
    assert sum(b.size for b in batches) == 30
    for b in batches:
        np.testing.assert_array_equal(b.src_pad, b.src == vocab.pad)
        np.testing.assert_array_equal(b.tgt_pad, b.tgt == vocab.pad)
        np.testing.assert_array_equal(b.lengths, (~b.tgt_pad).sum(axis=1))
        assert (b.at_in[:, 0] == vocab.bos).all()
        assert ((b.at_out == vocab.eos).sum(axis=1) == 1).all()
