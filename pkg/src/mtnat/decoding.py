"""Inference: autoregressive beam search and iterative mask-predict."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import remove_bpe, tokenize
from .tensor import no_grad


@dataclass
class DecodeConfig:
    beam: int = 4
    max_len: int = 64
    iterations: int = 4
    length_beam: int = 3

    def __post_init__(self):
        for key in ("beam", "max_len", "iterations", "length_beam"):
            if int(getattr(self, key)) < 1:
                raise ValueError(f"{key} must be >= 1")


@dataclass
class DecodeResult:
    tokens: list
    confidences: list
    length: int
    iterations: int = 1
    score: float = 0.0
    truncated: bool = False
    candidates: dict = field(default_factory=dict)  # length -> score (mask-predict)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _banned(model):
    vocab = model.vocab
    ids = [0, model.bos_id]
    if vocab is not None and vocab.mask is not None:
        ids.append(vocab.mask)
    elif vocab is None:
        ids.append(model.mask_id)
    return ids


def _as_src_matrix(sources, pad=0):
    rows = [list(s) for s in sources]
    out = np.full((len(rows), max(len(r) for r in rows)), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------- AT decoding


def at_beam_decode_batch(model, sources, cfg):
    """Length-normalised beam search for a list of source id sequences.

    Scores are mean log-probabilities per emitted token (EOS included).
    Only EOS candidates that rank inside the top ``beam`` are finalised and a
    source stops once its best-ranked candidate is EOS, so ``beam=1``
    reproduces greedy decoding exactly. A source with no finished
    hypothesis after ``max_len`` tokens returns its best partial hypothesis
    flagged ``truncated``.
    """
    k = cfg.beam
    max_len = min(cfg.max_len, model.config.max_positions)
    eos = 2 if model.vocab is None else model.vocab.eos
    banned = _banned(model)
    src = _as_src_matrix(sources)
    n = len(src)
    with no_grad():
        enc = model.encode(src)
        rep = enc.select(np.repeat(np.arange(n), k))
        tokens = np.full((n * k, 1), model.bos_id, dtype=np.int64)
        scores = np.full((n, k), -np.inf)
        scores[:, 0] = 0.0
        token_lp = np.zeros((n * k, 0))
        finished = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        for _ in range(max_len):
            lp = _log_softmax(model.at_logits(rep, tokens).data[:, -1, :])
            lp[:, banned] = -np.inf
            v = lp.shape[1]
            cand = (scores.reshape(-1, 1) + lp).reshape(n, k * v)
            new_tokens = np.concatenate([tokens, np.full((n * k, 1), eos)], axis=1)
            new_lp = np.concatenate([token_lp, np.zeros((n * k, 1))], axis=1)
            new_scores = np.full((n, k), -np.inf)
            for i in range(n):
                if done[i]:
                    continue
                order = np.argsort(-cand[i], kind="stable")[: 2 * k]
                live, top_finished = 0, False
                for rank, c in enumerate(order):
                    total = cand[i, c]
                    if not np.isfinite(total):
                        break
                    b, tok = divmod(int(c), v)
                    row = i * k + b
                    if tok == eos:
                        if rank < k:
                            lps = token_lp[row].tolist() + [float(lp[row, tok])]
                            finished[i].append((total / len(lps), tokens[row, 1:].tolist(), lps))
                            top_finished = top_finished or rank == 0
                        continue
                    if live < k:
                        dst = i * k + live
                        new_tokens[dst, :-1] = tokens[row]
                        new_tokens[dst, -1] = tok
                        new_lp[dst, :-1] = token_lp[row]
                        new_lp[dst, -1] = lp[row, tok]
                        new_scores[i, live] = total
                        live += 1
                if top_finished or live == 0:
                    done[i] = True
            tokens, token_lp, scores = new_tokens, new_lp, new_scores
            if done.all():
                break
        for i in np.flatnonzero(~done):
            if finished[i]:
                continue
            for b in range(k):
                if np.isfinite(scores[i, b]):
                    row = i * k + b
                    lps = token_lp[row].tolist()
                    finished[i].append((scores[i, b] / len(lps), tokens[row, 1:].tolist(), lps, True))
    results = []
    for i in range(n):
        best = max(finished[i], key=lambda f: f[0])  # first of equals wins
        truncated = len(best) == 4
        score, seq, lps = best[:3]
        conf = lps if truncated else lps[:-1]
        results.append(DecodeResult(seq, conf, len(seq), 1, float(score), truncated))
    return results


def at_beam_decode(model, source, cfg):
    return at_beam_decode_batch(model, [source], cfg)[0]


def greedy_decode(model, source, max_len):
    """Plain argmax decoding; the reference that beam size 1 must match."""
    max_len = min(max_len, model.config.max_positions)
    eos = 2 if model.vocab is None else model.vocab.eos
    banned = _banned(model)
    with no_grad():
        enc = model.encode(np.asarray([source], dtype=np.int64))
        seq, lps = [model.bos_id], []
        for _ in range(max_len):
            lp = _log_softmax(model.at_logits(enc, np.asarray([seq])).data[0, -1])
            lp[banned] = -np.inf
            tok = int(np.argmax(lp))
            lps.append(float(lp[tok]))
            if tok == eos:
                break
            seq.append(tok)
        else:
            return DecodeResult(seq[1:], lps, max_len, 1, float(np.mean(lps)), True)
    out = seq[1:]
    return DecodeResult(out, lps[: len(out)], len(out), 1, float(np.mean(lps)), False)


# --------------------------------------------------------------- mask-predict


def remask_count(n, iterations, t):
    """Number of positions re-masked after iteration ``t`` of ``iterations``."""
    if n < 1 or iterations < 1 or not 1 <= t <= iterations:
        raise ValueError(f"remask_count: need n >= 1 and 1 <= t <= T, got n={n}, t={t}, T={iterations}")
    return (n * (iterations - t)) // iterations


def _nat_banned(model):
    return _banned(model) + ([2] if model.vocab is None else [model.vocab.eos])


def mask_predict_length(model, enc, n, iterations, banned=None):
    """Run mask-predict for one fixed target length ``n``; returns tokens and confidences."""
    banned = _nat_banned(model) if banned is None else banned
    mask = model.mask_id
    tokens = np.full(n, mask, dtype=np.int64)
    conf = np.zeros(n)
    masked = np.ones(n, dtype=bool)
    for t in range(1, iterations + 1):
        lp = _log_softmax(model.nat_logits(enc, tokens[None, :]).data[0])
        choose = lp.copy()
        choose[:, banned] = -np.inf
        best = np.argmax(choose, axis=1)
        idx = np.flatnonzero(masked)
        tokens[idx] = best[idx]
        conf[idx] = lp[idx, best[idx]]
        k = remask_count(n, iterations, t)
        masked[:] = False
        if k:
            worst = np.argsort(conf, kind="stable")[:k]
            masked[worst] = True
            tokens[worst] = mask
    return tokens, conf


def mask_predict_decode(model, source, cfg):
    """Decode with the NAT decoder only.

    For each of the ``length_beam`` most probable lengths, start from an
    all-MASK sequence and run ``iterations`` rounds of predict/re-mask; keep
    the candidate with the highest mean log-probability.
    """
    banned = _nat_banned(model)
    with no_grad():
        enc = model.encode(np.asarray([source], dtype=np.int64))
        lengths = model.predict_length(enc).top(cfg.length_beam)[0]
        best = None
        scores = {}
        for n in lengths:
            tokens, conf = mask_predict_length(model, enc, n, cfg.iterations, banned)
            score = float(conf.mean())
            scores[n] = score
            if best is None or score > best[0]:
                best = (score, n, tokens, conf)
    score, n, tokens, conf = best
    return DecodeResult(tokens.tolist(), conf.tolist(), n, cfg.iterations, score, False, scores)


# ------------------------------------------------------------- text helpers


def detokenize(model, ids):
    toks = model.vocab.decode(ids)
    return remove_bpe(toks) if model.bpe is not None else " ".join(toks)


def translate(model, sentences, mode="mask-predict", cfg=None, batch_size=64):
    """Translate raw source strings; returns ``(texts, results)``.

    ``mode`` is ``"mask-predict"`` (NAT decoder) or ``"at"`` (beam search).
    """
    if model.vocab is None:
        raise ValueError("translate: model has no vocabulary attached")
    cfg = cfg or DecodeConfig()
    ids = [model.vocab.encode(tokenize(s, model.bpe)) for s in sentences]
    if mode == "at":
        if model.at_decoder is None:
            raise ValueError("translate: model has no autoregressive decoder")
        results = []
        for start in range(0, len(ids), batch_size):
            results.extend(at_beam_decode_batch(model, ids[start : start + batch_size], cfg))
    elif mode == "mask-predict":
        if model.nat_decoder is None:
            raise ValueError("translate: model has no mask-predict decoder")
        results = [mask_predict_decode(model, s, cfg) for s in ids]
    else:
        raise ValueError(f"translate: unknown mode {mode!r}")
    return [detokenize(model, r.tokens) for r in results], results
