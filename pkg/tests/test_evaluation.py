import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtnat.evaluation import bootstrap_indices, corpus_bleu, paired_bootstrap

# ---- independent reference: plain loops, exact fractions


def naive_bleu(hyps, refs):
    matches, totals = [0] * 4, [0] * 4
    c = r = 0
    for h, ref in zip(hyps, refs):
        h, ref = h.split(), ref.split()
        c += len(h)
        r += len(ref)
        for n in range(1, 5):
            grams = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
            rgrams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
            totals[n - 1] += len(grams)
            for g in set(grams):
                matches[n - 1] += min(grams.count(g), rgrams.count(g))
    if c == 0 or matches[0] == 0:
        return 0.0
    precisions = [Fraction(matches[0], totals[0])]
    for n in range(1, 4):
        precisions.append(Fraction(1, totals[n] + 1) if matches[n] == 0 else Fraction(matches[n], totals[n]))
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4)


def naive_p_value(hyps_a, hyps_b, refs, resamples, seed):
    idx = bootstrap_indices(len(refs), resamples, seed)
    worse = 0
    for row in idx:
        pick = lambda xs: [xs[i] for i in row]
        if naive_bleu(pick(hyps_a), pick(refs)) <= naive_bleu(pick(hyps_b), pick(refs)):
            worse += 1
    return worse / resamples


sentences = st.lists(st.sampled_from("a b c d e".split()), min_size=0, max_size=7).map(" ".join)
nonempty = st.lists(st.sampled_from("a b c d e".split()), min_size=1, max_size=7).map(" ".join)


# ---- golden cases


def test_perfect_match_is_100():
    refs = ["the cat sat on the mat", "a b c d e"]
    assert corpus_bleu(refs, refs).bleu == 100.0


def test_empty_hypotheses_score_zero():
    rep = corpus_bleu(["", ""], ["a b", "c"])
    assert rep.bleu == 0.0 and rep.hyp_len == 0


def test_clipping_counts_reference_occurrences():
    # "the" occurs once in the reference, so only one of four hypothesis tokens matches
    rep = corpus_bleu(["the the the the"], ["the cat"])
    assert rep.matches[0] == 1 and rep.totals[0] == 4
    assert rep.precisions[0] == 0.25


def test_brevity_penalty_hand_value():
    rep = corpus_bleu(["the cat sat"], ["the cat sat on the mat"])
    assert rep.brevity_penalty == pytest.approx(math.exp(1 - 6 / 3), rel=1e-15)
    assert rep.bleu == pytest.approx(naive_bleu(["the cat sat"], ["the cat sat on the mat"]), rel=1e-12)


def test_length_mismatch_is_an_error():
    with pytest.raises(ValueError):
        corpus_bleu(["a"], ["a", "b"])


def test_case_is_significant():
    assert corpus_bleu(["The cat"], ["the cat"]).bleu < 100.0


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(sentences, nonempty), min_size=1, max_size=8))
def test_matches_independent_reference(pairs):
    hyps, refs = [p[0] for p in pairs], [p[1] for p in pairs]
    rep = corpus_bleu(hyps, refs)
    assert rep.bleu == pytest.approx(naive_bleu(hyps, refs), rel=1e-12, abs=1e-12)
    assert rep.bleu == pytest.approx(rep.recompute(), rel=1e-12, abs=1e-12)
    assert 0.0 <= rep.bleu <= 100.0 and 0.0 <= rep.brevity_penalty <= 1.0
    assert all(0.0 <= p <= 1.0 for p in rep.precisions)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(sentences, nonempty), min_size=2, max_size=8), st.randoms(use_true_random=False))
def test_joint_permutation_invariance(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = corpus_bleu([p[0] for p in pairs], [p[1] for p in pairs])
    b = corpus_bleu([p[0] for p in shuffled], [p[1] for p in shuffled])
    assert a.bleu == b.bleu


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(nonempty, nonempty), min_size=1, max_size=6))
def test_truncation_below_reference_length_never_raises_bp(pairs):
    refs = [r + " x y z" for _, r in pairs]
    long = [h for h, _ in pairs]
    short = [" ".join(h.split()[: max(1, len(h.split()) // 2)]) for h in long]
    assert corpus_bleu(short, refs).brevity_penalty <= corpus_bleu(long, refs).brevity_penalty


# ---- bootstrap


def test_identical_systems_never_win():
    hyps = ["a b c", "b c d", "a a"]
    refs = ["a b c", "b c", "a b"]
    rep = paired_bootstrap(hyps, hyps, refs, resamples=200, seed=1)
    assert rep.p_value == 1.0 and rep.ties == 200 and rep.flag == ""


def test_dominant_system_always_wins():
    refs = [f"w{i} x{i} y{i} z{i}" for i in range(20)]
    rep = paired_bootstrap(refs, [""] * 20, refs, resamples=1000, seed=0)
    assert rep.p_value == 0.0 and rep.wins_a == 1000 and rep.flag == "⇑"


def test_bootstrap_is_seed_deterministic():
    refs = ["a b c d"] * 5 + ["b c d e"] * 5
    a = ["a b c d"] * 6 + ["b"] * 4
    b = ["a b"] * 10
    r1, r2 = paired_bootstrap(a, b, refs, 100, seed=4), paired_bootstrap(a, b, refs, 100, seed=4)
    assert r1 == r2


def test_bootstrap_input_errors():
    with pytest.raises(ValueError):
        paired_bootstrap(["a"], ["a", "b"], ["a"])
    with pytest.raises(ValueError):
        paired_bootstrap(["a"], ["a"], ["a"], resamples=0)
    with pytest.raises(ValueError):
        paired_bootstrap([], [], [])


def _ninety_percent_set(rng):
    refs, a, b = [], [], []
    for i in range(30):
        words = [f"t{j}" for j in rng.permutation(12)[:6]]
        ref = " ".join(words)
        good, bad = ref, " ".join(words[:2] + ["q"] * 4)
        refs.append(ref)
        if i < 27:
            a.append(good), b.append(bad)
        else:
            a.append(bad), b.append(good)
    return a, b, refs


def test_monte_carlo_against_naive_oracle():
    rng = np.random.default_rng(0)
    a, b, refs = _ninety_percent_set(rng)
    significant = 0
    for seed in range(100):
        p = paired_bootstrap(a, b, refs, resamples=200 if seed >= 5 else 1000, seed=seed).p_value
        if seed < 5:
            assert p == naive_p_value(a, b, refs, 1000, seed)
        significant += p < 0.05
    assert significant >= 95


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(sentences, sentences, nonempty), min_size=2, max_size=8), st.integers(0, 1000))
def test_p_values_of_both_directions_cover_ties(triples, seed):
    a, b, refs = ([t[i] for t in triples] for i in range(3))
    p_ab = paired_bootstrap(a, b, refs, 50, seed).p_value
    p_ba = paired_bootstrap(b, a, refs, 50, seed).p_value
    assert p_ab + p_ba >= 1.0
