"""Corpus BLEU and paired bootstrap resampling.

Sentences are whitespace-tokenised strings (or token lists); case is kept.
BLEU uses clipped n-gram precisions up to 4-grams, their geometric mean and
the brevity penalty ``exp(1 - r/c)`` when ``c < r``. A higher-order
precision whose match count is zero is smoothed to ``1 / (total + 1)``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

MAX_ORDER = 4
# per-sentence statistic columns: matches[1..4], totals[1..4], hyp length, ref length
_M, _T, _C, _R = slice(0, 4), slice(4, 8), 8, 9


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def recompute(self):
        if self.hyp_len == 0 or min(self.precisions) <= 0.0:
            return 0.0
        return 100.0 * self.brevity_penalty * math.exp(sum(math.log(p) for p in self.precisions) / MAX_ORDER)

    def to_dict(self):
        return asdict(self)


@dataclass
class SignificanceReport:
    bleu_a: float
    bleu_b: float
    wins_a: int
    wins_b: int
    ties: int
    p_value: float
    resamples: int
    seed: int

    @property
    def flag(self):
        """``⇑`` when A is better at p < 0.01, ``↑`` at p < 0.05, else empty."""
        if self.p_value < 0.01:
            return "⇑"
        if self.p_value < 0.05:
            return "↑"
        return ""

    def to_dict(self):
        d = asdict(self)
        d["flag"] = self.flag
        return d


def _tokens(sentence):
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp, ref):
    """Clipped match counts, n-gram totals and lengths for one pair."""
    h, r = _tokens(hyp), _tokens(ref)
    row = np.zeros(10)
    for n in range(1, MAX_ORDER + 1):
        hn, rn = _ngrams(h, n), _ngrams(r, n)
        row[n - 1] = sum(min(c, rn[g]) for g, c in hn.items())
        row[MAX_ORDER + n - 1] = max(len(h) - n + 1, 0)
    row[_C], row[_R] = len(h), len(r)
    return row


def corpus_stats(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"corpus_bleu: {len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        return np.zeros((0, 10))
    return np.stack([sentence_stats(h, r) for h, r in zip(hyps, refs)])


def _bleu_from_sums(sums):
    """Vectorised BLEU over rows of summed statistics; returns (bleu, precisions, bp)."""
    sums = np.atleast_2d(sums)
    m, t = sums[:, _M], sums[:, _T]
    c, r = sums[:, _C], sums[:, _R]
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(t > 0, m / np.where(t > 0, t, 1.0), 0.0)
        smooth = 1.0 / (t + 1.0)
        p[:, 1:] = np.where(m[:, 1:] == 0, smooth[:, 1:], p[:, 1:])
        bp = np.where(c >= r, 1.0, np.exp(1.0 - r / np.where(c > 0, c, 1.0)))
        logp = np.log(np.where(p > 0, p, 1.0)).mean(axis=1)
    ok = (c > 0) & (p[:, 0] > 0)
    bleu = np.where(ok, 100.0 * bp * np.exp(logp), 0.0)
    bp = np.where(c > 0, bp, 0.0)
    return bleu, p, bp


def corpus_bleu(hyps, refs):
    stats = corpus_stats(hyps, refs)
    sums = stats.sum(axis=0)
    bleu, p, bp = _bleu_from_sums(sums)
    return BleuReport(
        bleu=float(bleu[0]),
        precisions=[float(x) for x in p[0]],
        brevity_penalty=float(bp[0]),
        hyp_len=int(sums[_C]),
        ref_len=int(sums[_R]),
        matches=[int(x) for x in sums[_M]],
        totals=[int(x) for x in sums[_T]],
    )


def bootstrap_indices(n, resamples, seed):
    return np.random.default_rng(seed).integers(0, n, size=(resamples, n))


def paired_bootstrap(hyps_a, hyps_b, refs, resamples=1000, seed=0):
    """One-sided paired bootstrap test of "A beats B".

    Each resample draws sentence indices with replacement and scores both
    systems on the same multiset. The p-value is the fraction of resamples
    with ``BLEU_A <= BLEU_B``.
    """
    if not len(hyps_a) == len(hyps_b) == len(refs):
        raise ValueError(
            f"paired_bootstrap: misaligned lists ({len(hyps_a)}, {len(hyps_b)}, {len(refs)})"
        )
    if resamples < 1:
        raise ValueError("paired_bootstrap: resamples must be >= 1")
    if not refs:
        raise ValueError("paired_bootstrap: empty test set")
    sa, sb = corpus_stats(hyps_a, refs), corpus_stats(hyps_b, refs)
    idx = bootstrap_indices(len(refs), resamples, seed)
    ba = _bleu_from_sums(kernels.bootstrap_sums(sa, idx))[0]
    bb = _bleu_from_sums(kernels.bootstrap_sums(sb, idx))[0]
    wins_a, wins_b = int((ba > bb).sum()), int((bb > ba).sum())
    return SignificanceReport(
        bleu_a=corpus_bleu(hyps_a, refs).bleu,
        bleu_b=corpus_bleu(hyps_b, refs).bleu,
        wins_a=wins_a,
        wins_b=wins_b,
        ties=resamples - wins_a - wins_b,
        p_value=float((ba <= bb).mean()),
        resamples=int(resamples),
        seed=int(seed),
    )
