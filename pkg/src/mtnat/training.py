"""Joint AT/NAT optimisation, checkpointing and sequence-level distillation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ConfigError, ParallelCorpus, build_batches
from .decoding import DecodeConfig, translate
from .model import load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tape, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MultiTaskLossConfig:
    lam: float = 0.5
    label_smoothing: float = 0.1
    length_weight: float = 0.1
    # optional linear schedule lam -> lam_end over lam_steps; off by default
    lam_end: float | None = None
    lam_steps: int = 0

    def __post_init__(self):
        for key in ("lam", "lam_end"):
            v = getattr(self, key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1], got {v}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.length_weight < 0:
            raise ConfigError("length_weight must be >= 0")

    def lam_at(self, step):
        if self.lam_end is None or self.lam_steps <= 0:
            return self.lam
        frac = min(step / self.lam_steps, 1.0)
        return self.lam + (self.lam_end - self.lam) * frac


@dataclass
class LossBreakdown:
    loss: T.Tensor
    L: float
    L_at: float
    L_nat: float
    lam: float
    tokens_at: int
    tokens_nat: int

    def record(self, step, lr):
        return {
            "step": step, "L": self.L, "L_at": self.L_at, "L_nat": self.L_nat, "lambda": self.lam,
            "lr": lr, "tokens_at": self.tokens_at, "tokens_nat": self.tokens_nat,
        }


def sample_nat_mask(lengths, width, rng):
    """Per row, mask a uniform random subset of k ~ U{1..len} positions."""
    mask = np.zeros((len(lengths), width), dtype=bool)
    for i, n in enumerate(lengths):
        k = int(rng.integers(1, n + 1))
        mask[i, rng.permutation(n)[:k]] = True
    return mask


def _weighted(lam):
    # a zero-weighted term is evaluated for logging only, off the tape
    return no_grad() if lam == 0.0 else _null()


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def multitask_loss(model, batch, cfg, rng, train=True, lam=None):
    """``L = lam * L_at + (1 - lam) * L_nat`` for one batch.

    Both decoders see the same target; the NAT decoder sees it with a random
    subset masked and is scored on the masked positions plus a weighted
    length-classification loss. Each term is a per-token mean. ``rng`` draws
    the NAT masks first and then dropout noise (only when ``train``).
    """
    lam = cfg.lam if lam is None else lam
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    has_at, has_nat = model.at_decoder is not None, model.nat_decoder is not None
    if (lam > 0 and not has_at) or (lam < 1 and not has_nat):
        raise ConfigError(f"lambda={lam} needs a decoder this model does not have ({model.config.decoders})")
    pad = model.pad_id
    nat_mask = sample_nat_mask(batch.lengths, batch.tgt.shape[1], rng) if has_nat else None
    drop = rng if train else None
    enc = model.encode(batch, rng=drop)

    zero = T.Tensor(0.0)
    L_at, tok_at = zero, 0
    if has_at:
        with _weighted(lam):
            logits = model.at_logits(enc, batch.at_in, rng=drop)
            v = logits.shape[-1]
            L_at = T.cross_entropy(
                T.reshape(logits, (-1, v)), batch.at_out.reshape(-1), ignore_index=pad,
                label_smoothing=cfg.label_smoothing,
            )
            tok_at = int((batch.at_out != pad).sum())

    L_nat, tok_nat = zero, 0
    if has_nat:
        with _weighted(1.0 - lam):
            nat_in = np.where(nat_mask, model.mask_id, batch.tgt)
            logits = model.nat_logits(enc, nat_in, rng=drop)
            v = logits.shape[-1]
            targets = np.where(nat_mask, batch.tgt, pad)
            L_tok = T.cross_entropy(
                T.reshape(logits, (-1, v)), targets.reshape(-1), ignore_index=pad,
                label_smoothing=cfg.label_smoothing,
            )
            gold = model.length_targets(batch.lengths, batch.src_lengths)
            L_len = T.cross_entropy(model.length_logits(enc), gold)
            L_nat = T.add(L_tok, T.mul(L_len, cfg.length_weight))
            tok_nat = int(nat_mask.sum())

    loss = T.add(T.mul(L_at, lam), T.mul(L_nat, 1.0 - lam))
    return LossBreakdown(loss, loss.item(), L_at.item(), L_nat.item(), lam, tok_at, tok_nat)


# ------------------------------------------------------------------ optimiser


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    batch_size: int = 32
    max_steps: int = 1000
    checkpoint_interval: int = 0
    seed: int = 0
    max_len: int = 64

    def __post_init__(self):
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")


def inverse_sqrt_lr(step, peak, warmup):
    """Linear warmup to ``peak`` then decay proportional to 1/sqrt(step)."""
    step = max(step, 1)
    if warmup == 0:
        return peak / math.sqrt(step)
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Adam over one flat buffer; parameters are re-pointed to views of it."""

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.slices = {}
        offset = 0
        for k, p in self.params.items():
            self.slices[k] = slice(offset, offset + p.size)
            offset += p.size
        self.flat = np.empty(offset)
        for k, p in self.params.items():
            self.flat[self.slices[k]] = p.data.reshape(-1)
            p.data = self.flat[self.slices[k]].reshape(p.shape)
        self.m = np.zeros(offset)
        self.v = np.zeros(offset)
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        g = np.zeros_like(self.flat)
        touched = np.zeros_like(self.flat, dtype=bool)
        for k, p in self.params.items():
            if p.grad is not None:
                g[self.slices[k]] = p.grad.reshape(-1)
                touched[self.slices[k]] = True
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * (g * g)
        step = (lr / (1.0 - b1**self.t)) * self.m / (np.sqrt(self.v / (1.0 - b2**self.t)) + self.eps)
        # parameters no gradient reached are left untouched
        self.flat -= np.where(touched, step, 0.0)

    def state_dict(self):
        out = {}
        for k, sl in self.slices.items():
            out[f"m/{k}"] = self.m[sl].reshape(self.params[k].shape)
            out[f"v/{k}"] = self.v[sl].reshape(self.params[k].shape)
        out["t"] = self.t
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k, sl in self.slices.items():
            self.m[sl] = np.asarray(state[f"m/{k}"], dtype=np.float64).reshape(-1)
            self.v[sl] = np.asarray(state[f"v/{k}"], dtype=np.float64).reshape(-1)


# --------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: object
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    skipped: int = 0


class _EpochBatches:
    """Batch for any global step: epoch ``e`` is shuffled with ``(seed, e)``."""

    def __init__(self, corpus, model, tc):
        # pairs the model cannot position-encode are skipped, not fatal
        self.args = (corpus, model.vocab, tc.batch_size, min(tc.max_len, model.config.max_positions))
        self.bpe = model.bpe
        self.seed = tc.seed
        self.epoch = None
        self.batches = []
        self.skipped = 0

    def __call__(self, step):
        if self.epoch is None:
            self._load(0)
        n = len(self.batches)
        if n == 0:
            raise ValueError("no trainable pairs: every pair exceeds max_len")
        epoch, idx = divmod(step, n)
        if epoch != self.epoch:
            self._load(epoch)
        return self.batches[idx]

    def _load(self, epoch):
        self.batches, self.skipped = build_batches(*self.args, seed=[self.seed, epoch], bpe=self.bpe)
        self.epoch = epoch


def train(model, corpus, tc, lc, out_dir=None, resume=None, log_every=0):
    """Optimise ``model`` on ``corpus`` for ``tc.max_steps`` updates.

    Writes ``metrics.jsonl`` and ``checkpoints/step_XXXXXX.ckpt`` under
    ``out_dir`` when given (checkpoints every ``tc.checkpoint_interval``
    steps, including step 0, plus the final step). ``resume`` is a checkpoint
    path whose optimiser and RNG state continue the run bit-exactly.
    """
    if model.vocab is None:
        raise ValueError("model has no vocabulary attached")
    opt = Adam(model.named_parameters(), tc.beta1, tc.beta2, tc.eps)
    rng = np.random.default_rng([tc.seed, 7])
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        for name, p in model.named_parameters().items():
            p.data[...] = ck.model.named_parameters()[name].data
        opt.load_state_dict(ck.optimizer)
        rng.bit_generator.state = ck.rng_state
        start = ck.step

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    result = TrainResult(model)
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8")

    def checkpoint(step):
        if out is None:
            return
        path = save_checkpoint(
            out / "checkpoints" / f"step_{step:06d}.ckpt", model, step=step, seed=tc.seed,
            optimizer=opt.state_dict(), rng_state=rng.bit_generator.state,
            extra={"train": asdict(tc), "loss": asdict(lc)},
        )
        result.checkpoints.append(path)

    batches = _EpochBatches(corpus, model, tc)
    try:
        if start == 0 and tc.checkpoint_interval:
            checkpoint(0)
        for step in range(start + 1, tc.max_steps + 1):
            batch = batches(step - 1)
            lr = inverse_sqrt_lr(step, tc.lr, tc.warmup)
            try:
                with Tape() as tape:
                    lb = multitask_loss(model, batch, lc, rng, train=True, lam=lc.lam_at(step))
                opt.zero_grad()
                T.backward(lb.loss, tape)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from exc
            opt.step(lr)
            rec = lb.record(step, lr)
            result.metrics.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if log_every and step % log_every == 0:
                log.info("step %d L=%.4f L_at=%.4f L_nat=%.4f", step, lb.L, lb.L_at, lb.L_nat)
            if (tc.checkpoint_interval and step % tc.checkpoint_interval == 0) or step == tc.max_steps:
                if not result.checkpoints or result.checkpoints[-1].name != f"step_{step:06d}.ckpt":
                    checkpoint(step)
    finally:
        if metrics_fh:
            metrics_fh.close()
    result.skipped = batches.skipped
    return result


def validate_metrics(records, tol=1e-12):
    """Check ``L == lam*L_at + (1-lam)*L_nat`` for every logged record."""
    bad = [r["step"] for r in records if abs(r["L"] - (r["lambda"] * r["L_at"] + (1 - r["lambda"]) * r["L_nat"])) > tol]
    return not bad, bad


# --------------------------------------------------------------- distillation


@dataclass
class DistillResult:
    corpus: ParallelCorpus
    fallbacks: int


def distill_corpus(teacher, corpus, beam=4, batch_size=64, max_len=None):
    """Replace every target with the teacher's beam-search translation.

    An empty teacher output keeps the original target and is counted as a
    fallback. Sources and pair order are unchanged.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if teacher.at_decoder is None:
        raise ValueError("teacher needs an autoregressive decoder")
    cfg = DecodeConfig(beam=beam, max_len=max_len or teacher.config.max_positions)
    texts, _ = translate(teacher, corpus.sources, "at", cfg, batch_size)
    targets, fallbacks = [], 0
    for text, original in zip(texts, corpus.targets):
        if not text.strip():
            fallbacks += 1
            text = original
        targets.append(text)
    return DistillResult(ParallelCorpus(list(corpus.sources), targets, "distilled"), fallbacks)
