import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtnat import tensor as T
from mtnat import training
from mtnat.data import ConfigError, ParallelCorpus, ToyTaskSpec, build_batches, build_tokenizer, generate_toy_corpus
from mtnat.model import ModelConfig, init_model, load_checkpoint
from mtnat.tensor import Tape
from mtnat.training import (
    Adam,
    MultiTaskLossConfig,
    TrainConfig,
    TrainingDiverged,
    distill_corpus,
    inverse_sqrt_lr,
    multitask_loss,
    sample_nat_mask,
    train,
    validate_metrics,
)


@pytest.fixture(scope="module")
def setup():
    corpus = generate_toy_corpus(ToyTaskSpec("lexicon", vocab_size=12, min_len=2, max_len=6, seed=0), 60)
    bpe, vocab = build_tokenizer(corpus, 20)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, d_ff=16, enc_layers=1, at_layers=1, nat_layers=1,
                      max_positions=32, dropout=0.1)
    batches, _ = build_batches(corpus, vocab, 8, 32, seed=0, bpe=bpe)
    return corpus, bpe, vocab, cfg, batches


def fresh(setup, seed=0, **kw):
    _, bpe, vocab, cfg, _ = setup
    if kw:
        cfg = ModelConfig(**{**cfg.to_dict(), **kw})
    return init_model(cfg, seed=seed, vocab=vocab, bpe=bpe)


@pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 1.0])
def test_logged_loss_is_the_weighted_sum(setup, lam):
    model = fresh(setup)
    for i, batch in enumerate(setup[4]):
        lb = multitask_loss(model, batch, MultiTaskLossConfig(lam=lam), np.random.default_rng(i))
        assert abs(lb.L - (lam * lb.L_at + (1 - lam) * lb.L_nat)) <= 1e-12
        assert math.isfinite(lb.L_at) and math.isfinite(lb.L_nat)


def _encoder_grad(model, batch, lam, seed):
    with Tape() as tape:
        lb = multitask_loss(model, batch, MultiTaskLossConfig(lam=lam), np.random.default_rng(seed), train=False)
    T.backward(lb.loss, tape)
    grads = {k: p.grad.copy() for k, p in model.encoder.named_parameters().items()}
    for p in model.parameters():
        p.grad = None
    return grads


def test_encoder_gradient_is_linear_in_lambda(setup):
    model = fresh(setup)
    batch = setup[4][0]
    g_at, g_nat = _encoder_grad(model, batch, 1.0, 3), _encoder_grad(model, batch, 0.0, 3)
    for lam in (0.25, 0.5, 0.8):
        g = _encoder_grad(model, batch, lam, 3)
        for k in g:
            np.testing.assert_allclose(g[k], lam * g_at[k] + (1 - lam) * g_nat[k], rtol=0, atol=1e-10)


@pytest.mark.parametrize("lam,idle", [(0.0, "at_decoder"), (1.0, "nat_decoder")])
def test_zero_weighted_decoder_gets_no_gradient(setup, lam, idle):
    model = fresh(setup)
    with Tape() as tape:
        lb = multitask_loss(model, setup[4][0], MultiTaskLossConfig(lam=lam), np.random.default_rng(0))
    T.backward(lb.loss, tape)
    assert all(p.grad is None for p in getattr(model, idle).parameters())
    assert all(p.grad is not None for p in model.encoder.parameters())
    # the idle term is still evaluated for logging
    assert lb.L_at > 0 and lb.L_nat > 0


def test_lambda_needs_matching_decoder(setup):
    model = fresh(setup, decoders=("nat",))
    with pytest.raises(ConfigError):
        multitask_loss(model, setup[4][0], MultiTaskLossConfig(lam=0.5), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        MultiTaskLossConfig(lam=1.5)


def test_nat_only_model_trains_with_lambda_zero(setup):
    model = fresh(setup, decoders=("nat",))
    lb = multitask_loss(model, setup[4][0], MultiTaskLossConfig(lam=0.0), np.random.default_rng(0))
    assert lb.L == lb.L_nat and lb.L_at == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
def test_nat_mask_stays_inside_lengths(lengths, seed):
    width = max(lengths) + 2
    mask = sample_nat_mask(np.array(lengths), width, np.random.default_rng(seed))
    for row, n in zip(mask, lengths):
        assert 1 <= row[:n].sum() <= n and not row[n:].any()


def test_lr_schedule_shape():
    assert inverse_sqrt_lr(1, 1.0, 4) == 0.25
    assert inverse_sqrt_lr(4, 1.0, 4) == 1.0
    assert inverse_sqrt_lr(16, 1.0, 4) == 0.5
    assert inverse_sqrt_lr(9, 2.0, 0) == pytest.approx(2.0 / 3.0)


def test_adam_matches_reference_update():
    rng = np.random.default_rng(0)
    w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="w")
    ref = w.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    opt = Adam({"w": w}, 0.9, 0.98, 1e-9)
    for t in range(1, 6):
        g = rng.normal(size=(3, 2))
        w.grad = g.copy()
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.98**t)) + 1e-9)
        np.testing.assert_allclose(w.data, ref, rtol=1e-13, atol=1e-15)


def test_adam_leaves_unreached_parameters_alone():
    a = T.Tensor(np.ones(2), requires_grad=True, name="a")
    b = T.Tensor(np.ones(2), requires_grad=True, name="b")
    opt = Adam({"a": a, "b": b})
    a.grad = np.ones(2)
    opt.step(0.1)
    assert (a.data < 1).all() and (b.data == 1).all()


def test_training_reduces_loss_and_logs(setup, tmp_path):
    corpus = setup[0]
    model = fresh(setup)
    tc = TrainConfig(lr=3e-3, warmup=10, batch_size=8, max_steps=40, checkpoint_interval=20, seed=1)
    result = train(model, corpus, tc, MultiTaskLossConfig(), out_dir=tmp_path)
    first, last = np.mean([r["L"] for r in result.metrics[:5]]), np.mean([r["L"] for r in result.metrics[-5:]])
    assert last < first
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["step_000000.ckpt", "step_000020.ckpt", "step_000040.ckpt"]
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(1, 41))
    assert validate_metrics(records) == (True, [])


def test_resume_is_bit_exact(setup, tmp_path):
    corpus = setup[0]
    tc = TrainConfig(lr=3e-3, warmup=5, batch_size=8, max_steps=12, checkpoint_interval=5, seed=2)
    lc = MultiTaskLossConfig()
    full = train(fresh(setup), corpus, tc, lc, out_dir=tmp_path / "full")
    resumed_model = fresh(setup, seed=99)  # weights are overwritten by the checkpoint
    resumed = train(resumed_model, corpus, tc, lc, out_dir=tmp_path / "resumed",
                    resume=tmp_path / "full" / "checkpoints" / "step_000005.ckpt")
    assert [r["step"] for r in resumed.metrics] == list(range(6, 13))
    assert resumed.metrics == full.metrics[5:]
    for name, p in full.model.named_parameters().items():
        assert np.array_equal(p.data, resumed_model.named_parameters()[name].data)


def test_checkpoint_carries_training_state(setup, tmp_path):
    tc = TrainConfig(lr=1e-3, warmup=2, batch_size=8, max_steps=3, seed=4)
    train(fresh(setup), setup[0], tc, MultiTaskLossConfig(lam=0.25), out_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "checkpoints" / "step_000003.ckpt")
    assert ck.step == 3 and ck.seed == 4 and ck.optimizer["t"] == 3
    assert ck.extra["loss"]["lam"] == 0.25 and ck.extra["train"]["max_steps"] == 3


def test_non_finite_forward_aborts_training(setup):
    model = fresh(setup)
    model.encoder.embed.data[:] = np.inf
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(model, setup[0], TrainConfig(max_steps=2, batch_size=8), MultiTaskLossConfig())


def test_distillation_keeps_sources_and_counts_fallbacks(setup, monkeypatch):
    corpus = ParallelCorpus(["a b", "c d", "e"], ["x", "y", "z"])
    model = fresh(setup)
    outputs = ["p q", "", "r"]
    monkeypatch.setattr(training, "translate", lambda *a, **k: (outputs, None))
    result = distill_corpus(model, corpus, beam=2)
    assert result.corpus.sources == corpus.sources
    assert result.corpus.targets == ["p q", "y", "r"]
    assert result.fallbacks == 1


def test_distillation_needs_at_teacher(setup):
    with pytest.raises(ValueError):
        distill_corpus(fresh(setup, decoders=("nat",)), setup[0])
