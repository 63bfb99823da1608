"""Toy parallel corpora, BPE, vocabularies and padded batches."""
from __future__ import annotations

import collections
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK, MASK = "<pad>", "<bos>", "<eos>", "<unk>", "<mask>"
END_OF_WORD = "</w>"

_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_TARGET_ONSETS = "BDFGKLMNPRSTVZ"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- corpora


@dataclass
class ParallelCorpus:
    sources: list
    targets: list
    provenance: str = "raw"

    def __post_init__(self):
        if len(self.sources) != len(self.targets):
            raise ValueError(f"corpus sides differ: {len(self.sources)} vs {len(self.targets)} lines")
        if not self.sources:
            raise ValueError("corpus is empty")
        for i, (s, t) in enumerate(zip(self.sources, self.targets)):
            if not s.strip() or not t.strip():
                raise ValueError(f"pair {i} has an empty side")
        if self.provenance not in ("raw", "distilled"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.sources)

    @property
    def pairs(self):
        return list(zip(self.sources, self.targets))

    def save(self, prefix):
        prefix = str(prefix)
        Path(prefix).parent.mkdir(parents=True, exist_ok=True)
        for ext, lines in (("src", self.sources), ("tgt", self.targets)):
            with open(f"{prefix}.{ext}", "w", encoding="utf-8", newline="\n") as fh:
                fh.write("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, prefix, provenance=None):
        prefix = str(prefix)
        src = read_lines(f"{prefix}.src")
        tgt = read_lines(f"{prefix}.tgt")
        if len(src) != len(tgt):
            raise ValueError(f"{prefix}: .src has {len(src)} lines, .tgt has {len(tgt)}")
        if provenance is None:
            provenance = "distilled" if prefix.endswith(".distilled") else "raw"
        return cls(src, tgt, provenance)


def read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _make_words(n, onsets, rng):
    # pseudo-words of 1-3 syllables; rejection keeps them distinct
    words, seen = [], set()
    while len(words) < n:
        k = int(rng.integers(1, 4))
        w = "".join(onsets[rng.integers(len(onsets))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class ToyTaskSpec:
    """A synthetic translation task.

    ``copy`` and ``reverse`` are what they say. ``lexicon`` substitutes each
    source word through a bijective map and swaps every adjacent pair of
    "noun" words (scanning left to right, non-overlapping).
    """

    kind: str
    vocab_size: int = 40
    min_len: int = 3
    max_len: int = 12
    seed: int = 0
    lexicon: dict | None = None
    nouns: frozenset | None = None

    def __post_init__(self):
        if self.kind not in ("copy", "reverse", "lexicon"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.kind != "lexicon":
            return
        if self.lexicon is None:
            rng = np.random.default_rng([self.seed, 1])
            src = sorted(_make_words(self.vocab_size, _ONSETS, rng))
            tgt = _make_words(self.vocab_size, _TARGET_ONSETS, rng)
            object.__setattr__(self, "lexicon", dict(zip(src, tgt)))
            if self.nouns is None:
                pick = rng.permutation(len(src))[: len(src) // 2]
                object.__setattr__(self, "nouns", frozenset(src[i] for i in pick))
        if len(set(self.lexicon.values())) != len(self.lexicon):
            raise ConfigError("lexicon map is not bijective")
        object.__setattr__(self, "nouns", frozenset(self.nouns or ()))
        if not self.nouns <= set(self.lexicon):
            raise ConfigError("nouns must be source words of the lexicon")

    def source_words(self):
        if self.lexicon is not None:
            return sorted(self.lexicon)
        return sorted(_make_words(self.vocab_size, _ONSETS, np.random.default_rng([self.seed, 1])))

    def translate(self, words):
        if self.kind == "copy":
            return list(words)
        if self.kind == "reverse":
            return list(reversed(words))
        lex, nouns = self.lexicon, self.nouns
        out, i = [], 0
        while i < len(words):
            if i + 1 < len(words) and words[i] in nouns and words[i + 1] in nouns:
                out += [lex[words[i + 1]], lex[words[i]]]
                i += 2
            else:
                out.append(lex[words[i]])
                i += 1
        return out


def generate_toy_corpus(spec, n, seed=None):
    """Sample ``n`` pairs: a length uniformly, then tokens uniformly.

    The task (lexicon, nouns) depends only on ``spec.seed``; ``seed`` picks the
    sampling stream so train and held-out sets share one task.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    words = spec.source_words()
    rng = np.random.default_rng([spec.seed if seed is None else seed, 2])
    src, tgt = [], []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = [words[i] for i in rng.integers(0, len(words), size=length)]
        src.append(" ".join(sent))
        tgt.append(" ".join(spec.translate(sent)))
    return ParallelCorpus(src, tgt)


# ----------------------------------------------------------------------- BPE


def _word_symbols(word):
    return tuple(word[:-1]) + (word[-1] + END_OF_WORD,)


@dataclass
class BpeModel:
    merges: list = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache = {}

    def segment_word(self, word):
        if word in self._cache:
            return self._cache[word]
        symbols = list(_word_symbols(word))
        while len(symbols) > 1:
            ranked = [(self._ranks.get(p, len(self._ranks)), i) for i, p in enumerate(zip(symbols, symbols[1:]))]
            rank, i = min(ranked)
            if rank == len(self._ranks):
                break
            symbols[i : i + 2] = [symbols[i] + symbols[i + 1]]
        self._cache[word] = symbols
        return symbols

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(f"{a} {b}\n" for a, b in self.merges))

    @classmethod
    def load(cls, path):
        return cls([tuple(line.split(" ")) for line in read_lines(path) if line])


def learn_bpe(sentences, num_merges):
    """Greedy pair merging; ties go to the lexicographically smallest pair."""
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    counts = collections.Counter(w for s in sentences for w in s.split())
    if not counts:
        raise ValueError("cannot learn BPE from an empty corpus")
    vocab = {_word_symbols(w): c for w, c in counts.items()}
    merges = []
    for _ in range(num_merges):
        pairs = collections.Counter()
        for sym, c in vocab.items():
            for p in zip(sym, sym[1:]):
                pairs[p] += c
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        a, b = best
        new_vocab = {}
        for sym, c in vocab.items():
            out, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == a and sym[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            new_vocab[tuple(out)] = new_vocab.get(tuple(out), 0) + c
        vocab = new_vocab
    return BpeModel(merges)


def apply_bpe(model, sentence):
    return [s for w in sentence.split() for s in model.segment_word(w)]


def remove_bpe(tokens):
    """Inverse of :func:`apply_bpe`."""
    return "".join(tokens).replace(END_OF_WORD, " ").strip()


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    def __init__(self, tokens, with_mask=True):
        reserved = [PAD, BOS, EOS, UNK] + ([MASK] if with_mask else [])
        self.itos = reserved + [t for t in tokens if t not in reserved]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad, self.bos, self.eos, self.unk = 0, 1, 2, 3
        self.mask = 4 if with_mask else None
        self.n_reserved = len(reserved)

    def __len__(self):
        return len(self.itos)

    @property
    def has_mask(self):
        return self.mask is not None

    @classmethod
    def build(cls, token_lists, with_mask=True):
        counts = collections.Counter(t for toks in token_lists for t in toks)
        return cls(sorted(counts, key=lambda t: (-counts[t], t)), with_mask)

    def encode(self, tokens):
        return [self.stoi.get(t, self.unk) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(f"{t}\t{i}\n" for i, t in enumerate(self.itos)))

    @classmethod
    def load(cls, path):
        rows = [line.split("\t") for line in read_lines(path) if line]
        tokens = [t for t, _ in sorted(rows, key=lambda r: int(r[1]))]
        with_mask = MASK in tokens
        vocab = cls(tokens, with_mask)
        if vocab.itos != tokens:
            raise ValueError(f"{path}: reserved tokens are not at their fixed ids")
        return vocab


# -------------------------------------------------------------------- batches


@dataclass
class Batch:
    src: np.ndarray  # B x S, PAD-padded
    tgt: np.ndarray  # B x T target tokens (no BOS/EOS), PAD-padded
    src_pad: np.ndarray
    tgt_pad: np.ndarray
    lengths: np.ndarray  # gold target lengths
    at_in: np.ndarray  # BOS + target
    at_out: np.ndarray  # target + EOS

    @property
    def size(self):
        return self.src.shape[0]

    @property
    def src_lengths(self):
        return (~self.src_pad).sum(axis=1)


def _pad(rows, pad_id):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(src_ids, tgt_ids, vocab):
    src = _pad(src_ids, vocab.pad)
    tgt = _pad(tgt_ids, vocab.pad)
    at_in = _pad([[vocab.bos] + t for t in tgt_ids], vocab.pad)
    at_out = _pad([t + [vocab.eos] for t in tgt_ids], vocab.pad)
    return Batch(
        src=src,
        tgt=tgt,
        src_pad=src == vocab.pad,
        tgt_pad=tgt == vocab.pad,
        lengths=np.array([len(t) for t in tgt_ids], dtype=np.int64),
        at_in=at_in,
        at_out=at_out,
    )


def tokenize(sentence, bpe=None):
    return apply_bpe(bpe, sentence) if bpe is not None else sentence.split()


def build_batches(corpus, vocab, batch_size, max_len, seed, bpe=None):
    """Shuffle by ``seed`` and cut into padded batches.

    Pairs whose source exceeds ``max_len`` tokens, or whose target plus
    EOS does, are skipped. Returns
    ``(batches, skipped)``.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    for tok in (PAD, BOS, EOS, UNK):
        if tok not in vocab.stoi:
            raise ValueError(f"vocabulary lacks reserved token {tok}")
    encoded, skipped = [], 0
    for s, t in zip(corpus.sources, corpus.targets):
        si, ti = vocab.encode(tokenize(s, bpe)), vocab.encode(tokenize(t, bpe))
        # the decoder sees the target shifted by BOS/EOS, one token longer
        if len(si) > max_len or len(ti) + 1 > max_len:
            skipped += 1
            continue
        encoded.append((si, ti))
    order = np.random.default_rng(seed).permutation(len(encoded))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [encoded[i] for i in order[start : start + batch_size]]
        batches.append(make_batch([c[0] for c in chunk], [c[1] for c in chunk], vocab))
    return batches, skipped


def build_tokenizer(corpus, num_merges, with_mask=True):
    """Learn a joint BPE model and vocabulary over both corpus sides."""
    sentences = list(corpus.sources) + list(corpus.targets)
    bpe = learn_bpe(sentences, num_merges)
    vocab = Vocabulary.build([apply_bpe(bpe, s) for s in sentences], with_mask=with_mask)
    return bpe, vocab


def iter_batches(corpus, vocab, batch_size, max_len, seed, bpe=None):
    """Endless batch stream; epoch ``e`` is shuffled with seed ``(seed, e)``."""
    for epoch in itertools.count():
        batches, _ = build_batches(corpus, vocab, batch_size, max_len, [seed, epoch], bpe)
        yield from batches
