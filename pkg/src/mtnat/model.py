"""Shared-encoder transformer with an autoregressive and a mask-predict decoder.

One :class:`Encoder` instance is referenced by both decoding paths, so any
update made through one path is observed through the other. Decoders keep
their own target embeddings and output projections.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BpeModel, ConfigError, Vocabulary
from .tensor import Tensor

NEG_INF = -1e9
_COMPONENTS = ("encoder", "at_decoder", "nat_decoder", "length_head")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    at_layers: int = 2
    nat_layers: int = 2
    max_positions: int = 64
    dropout: float = 0.1
    length_offset: int = 16
    # "offset": classify target minus source length in [-length_offset, length_offset];
    # "absolute": classify the target length itself over 1..max_positions
    length_mode: str = "absolute"
    decoders: tuple = ("at", "nat")

    def __post_init__(self):
        self.decoders = tuple(self.decoders)
        counts = dict(
            vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            enc_layers=self.enc_layers, at_layers=self.at_layers, nat_layers=self.nat_layers,
            max_positions=self.max_positions,
        )
        for key, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.length_offset < 0:
            raise ConfigError("length_offset must be >= 0")
        if self.length_mode not in ("offset", "absolute"):
            raise ConfigError(f"length_mode must be 'offset' or 'absolute', got {self.length_mode!r}")
        if not self.decoders or not set(self.decoders) <= {"at", "nat"}:
            raise ConfigError(f"decoders must be a non-empty subset of ('at', 'nat'), got {self.decoders}")

    @property
    def length_classes(self):
        return self.max_positions if self.length_mode == "absolute" else 2 * self.length_offset + 1

    def to_dict(self):
        d = asdict(self)
        d["decoders"] = list(self.decoders)
        return d


# ------------------------------------------------------------------- layers


def _xavier(rng, d_in, d_out):
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class Module:
    def named_parameters(self):
        out = {}
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.name:
                out[value.name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters())
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        out.update(item.named_parameters())
        return out

    def parameters(self):
        return list(self.named_parameters().values())


class Linear(Module):
    def __init__(self, name, d_in, d_out, rng, bias=True):
        self.weight = Tensor(_xavier(rng, d_in, d_out), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.bias") if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, name, d):
        self.gamma = Tensor(np.ones(d), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.beta")

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


def dropout(x, p, rng):
    if rng is None or p == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return T.mul(x, keep)


class Attention(Module):
    # the key projection has no bias: softmax is invariant to it
    def __init__(self, name, d, heads, rng):
        self.heads = heads
        self.q = Linear(f"{name}.q", d, d, rng)
        self.k = Linear(f"{name}.k", d, d, rng, bias=False)
        self.v = Linear(f"{name}.v", d, d, rng)
        self.o = Linear(f"{name}.o", d, d, rng)

    def __call__(self, x, mem, key_pad, causal=False):
        b, t, d = x.shape
        s = mem.shape[1]
        h, dh = self.heads, d // self.heads
        q = T.transpose(T.reshape(self.q(x), (b, t, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self.k(mem), (b, s, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self.v(mem), (b, s, h, dh)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(dh))
        mask = key_pad[:, None, None, :]
        if causal:
            mask = mask | np.triu(np.ones((t, s), dtype=bool), 1)[None, None]
        probs = T.softmax(T.masked_fill(scores, mask, NEG_INF), axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, name, d, d_ff, rng):
        self.fc1 = Linear(f"{name}.fc1", d, d_ff, rng)
        self.fc2 = Linear(f"{name}.fc2", d_ff, d, rng)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, name, cfg, rng):
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.d_model)
        self.attn = Attention(f"{name}.self_attn", cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.d_model)
        self.ffn = FeedForward(f"{name}.ffn", cfg.d_model, cfg.d_ff, rng)
        self.p = cfg.dropout

    def __call__(self, x, pad, rng=None):
        y = self.ln1(x)
        x = T.add(x, dropout(self.attn(y, y, pad), self.p, rng))
        return T.add(x, dropout(self.ffn(self.ln2(x)), self.p, rng))


class DecoderLayer(Module):
    def __init__(self, name, cfg, rng, causal):
        self.causal = causal
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.d_model)
        self.self_attn = Attention(f"{name}.self_attn", cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.d_model)
        self.cross_attn = Attention(f"{name}.cross_attn", cfg.d_model, cfg.n_heads, rng)
        self.ln3 = LayerNorm(f"{name}.ln3", cfg.d_model)
        self.ffn = FeedForward(f"{name}.ffn", cfg.d_model, cfg.d_ff, rng)
        self.p = cfg.dropout

    def __call__(self, x, tgt_pad, enc, rng=None):
        y = self.ln1(x)
        x = T.add(x, dropout(self.self_attn(y, y, tgt_pad, causal=self.causal), self.p, rng))
        x = T.add(x, dropout(self.cross_attn(self.ln2(x), enc.states, enc.pad), self.p, rng))
        return T.add(x, dropout(self.ffn(self.ln3(x)), self.p, rng))


def _embed_table(rng, n, d, name):
    return Tensor(rng.normal(0.0, d**-0.5, size=(n, d)), requires_grad=True, name=name)


def _embed(table, pos_table, ids, d):
    n = ids.shape[1]
    tok = T.mul(T.embedding(table, ids), math.sqrt(d))
    return T.add(tok, T.embedding(pos_table, np.arange(n)[None, :]))


@dataclass
class EncoderStates:
    states: Tensor  # B x S x d
    pad: np.ndarray  # B x S, True at PAD

    @property
    def lengths(self):
        return (~self.pad).sum(axis=1)

    def select(self, rows):
        """Row-gathered copy for decoding (not differentiable)."""
        rows = np.asarray(rows)
        return EncoderStates(Tensor(self.states.data[rows]), self.pad[rows])


class Encoder(Module):
    def __init__(self, cfg, rng):
        d = cfg.d_model
        self.d = d
        self.embed = _embed_table(rng, cfg.vocab_size, d, "encoder.embed")
        self.pos = _embed_table(rng, cfg.max_positions, d, "encoder.pos")
        self.layers = [EncoderLayer(f"encoder.layers.{i}", cfg, rng) for i in range(cfg.enc_layers)]
        self.ln = LayerNorm("encoder.ln", d)
        self.p = cfg.dropout

    def __call__(self, src, pad, rng=None):
        x = dropout(_embed(self.embed, self.pos, src, self.d), self.p, rng)
        for layer in self.layers:
            x = layer(x, pad, rng)
        return EncoderStates(self.ln(x), pad)


class Decoder(Module):
    def __init__(self, name, cfg, rng, n_layers, causal):
        d = cfg.d_model
        self.d = d
        self.embed = _embed_table(rng, cfg.vocab_size, d, f"{name}.embed")
        self.pos = _embed_table(rng, cfg.max_positions, d, f"{name}.pos")
        self.layers = [DecoderLayer(f"{name}.layers.{i}", cfg, rng, causal) for i in range(n_layers)]
        self.ln = LayerNorm(f"{name}.ln", d)
        self.out = Linear(f"{name}.out", d, cfg.vocab_size, rng)
        self.p = cfg.dropout

    def __call__(self, ids, tgt_pad, enc, rng=None):
        x = dropout(_embed(self.embed, self.pos, ids, self.d), self.p, rng)
        for layer in self.layers:
            x = layer(x, tgt_pad, enc, rng)
        return self.out(self.ln(x))


LENGTH_INIT_SCALE = 0.1


class LengthHead(Module):
    """Classifies the target length (or its offset from the source length) from mean-pooled states."""

    def __init__(self, cfg, rng):
        self.proj = Linear("length_head", cfg.d_model, cfg.length_classes, rng)
        # small init keeps the untrained length distribution close to uniform
        self.proj.weight.data *= LENGTH_INIT_SCALE

    def __call__(self, enc):
        keep = ~enc.pad
        w = keep / keep.sum(axis=1, keepdims=True)
        b, _, d = enc.states.shape
        pooled = T.reshape(T.matmul(w[:, None, :], enc.states), (b, d))
        return self.proj(pooled)


@dataclass
class LengthDistribution:
    lengths: np.ndarray  # B x K candidate target lengths
    probs: np.ndarray  # B x K, zero where the length is inadmissible

    def top(self, k):
        """Top-``k`` admissible lengths per row; ties go to the shorter length."""
        out = []
        for lens, p in zip(self.lengths, self.probs):
            order = sorted(range(len(p)), key=lambda j: (-p[j], lens[j]))
            out.append([int(lens[j]) for j in order[:k] if p[j] > 0])
        return out


class SharedEncoderModel(Module):
    def __init__(self, config, seed=0, vocab=None, bpe=None):
        self.config = config
        self.seed = seed
        self.vocab = vocab
        self.bpe = bpe
        rngs = {c: np.random.default_rng([seed, i]) for i, c in enumerate(_COMPONENTS)}
        self.encoder = Encoder(config, rngs["encoder"])
        self.at_decoder = None
        self.nat_decoder = None
        self.length_head = None
        if "at" in config.decoders:
            self.at_decoder = Decoder("at_decoder", config, rngs["at_decoder"], config.at_layers, causal=True)
        if "nat" in config.decoders:
            self.nat_decoder = Decoder("nat_decoder", config, rngs["nat_decoder"], config.nat_layers, causal=False)
            self.length_head = LengthHead(config, rngs["length_head"])

    # parameter groups
    def encoder_parameters(self):
        return self.encoder.named_parameters()

    def at_parameters(self):
        return self.at_decoder.named_parameters() if self.at_decoder else {}

    def nat_parameters(self):
        out = {}
        if self.nat_decoder:
            out.update(self.nat_decoder.named_parameters())
            out.update(self.length_head.named_parameters())
        return out

    def at_path(self):
        return self.encoder, self.at_decoder

    def nat_path(self):
        return self.encoder, self.nat_decoder

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1 if self.vocab is None else self.vocab.bos

    @property
    def mask_id(self):
        return 4 if self.vocab is None else self.vocab.mask

    def _check_ids(self, ids):
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id out of range [0, {self.config.vocab_size})")
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions={self.config.max_positions}")

    def encode(self, src, src_pad=None, rng=None):
        """Run the shared encoder. ``src`` is a Batch or an id matrix."""
        if hasattr(src, "src"):
            src, src_pad = src.src, src.src_pad
        src = np.asarray(src, dtype=np.int64)
        if src_pad is None:
            src_pad = src == self.pad_id
        self._check_ids(src)
        return self.encoder(src, src_pad, rng)

    def at_logits(self, enc, prefix, rng=None):
        if self.at_decoder is None:
            raise RuntimeError("model has no autoregressive decoder")
        prefix = np.asarray(prefix, dtype=np.int64)
        if not np.all(prefix[:, 0] == self.bos_id):
            raise ValueError("autoregressive prefix must start with BOS")
        self._check_ids(prefix)
        return self.at_decoder(prefix, prefix == self.pad_id, enc, rng)

    def nat_logits(self, enc, ids, rng=None):
        if self.nat_decoder is None:
            raise RuntimeError("model has no non-autoregressive decoder")
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        return self.nat_decoder(ids, ids == self.pad_id, enc, rng)

    def length_logits(self, enc):
        if self.length_head is None:
            raise RuntimeError("model has no length head")
        return self.length_head(enc)

    def length_targets(self, tgt_lengths, src_lengths):
        """Gold class index of each target length for the length head, clipped to its range."""
        cfg = self.config
        tgt_lengths = np.asarray(tgt_lengths)
        if cfg.length_mode == "absolute":
            return np.clip(tgt_lengths, 1, cfg.max_positions) - 1
        off = cfg.length_offset
        return np.clip(tgt_lengths - np.asarray(src_lengths), -off, off) + off

    def predict_length(self, enc):
        logits = self.length_logits(enc).data
        cfg = self.config
        if cfg.length_mode == "absolute":
            lengths = np.broadcast_to(np.arange(1, cfg.max_positions + 1), logits.shape)
        else:
            offsets = np.arange(-cfg.length_offset, cfg.length_offset + 1)
            lengths = enc.lengths[:, None] + offsets[None, :]
        ok = (lengths >= 1) & (lengths <= self.config.max_positions)
        z = np.where(ok, logits, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        p = np.where(ok, np.exp(z), 0.0)
        return LengthDistribution(lengths, p / p.sum(axis=1, keepdims=True))


def init_model(config, seed=0, vocab=None, bpe=None):
    return SharedEncoderModel(config, seed, vocab, bpe)


def parameter_count(cfg):
    """Closed-form parameter count for a configuration."""
    d, f, v, p = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_positions
    attn = 4 * d * d + 3 * d  # q, v, o biases; no key bias
    ffn = 2 * d * f + f + d
    enc_layer = attn + ffn + 2 * 2 * d
    dec_layer = 2 * attn + ffn + 3 * 2 * d
    total = v * d + p * d + cfg.enc_layers * enc_layer + 2 * d
    decoder_base = v * d + p * d + 2 * d + d * v + v
    if "at" in cfg.decoders:
        total += decoder_base + cfg.at_layers * dec_layer
    if "nat" in cfg.decoders:
        total += decoder_base + cfg.nat_layers * dec_layer
        total += (d + 1) * cfg.length_classes
    return total


# ----------------------------------------------------------------- checkpoints

MAGIC = b"MTNATCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: SharedEncoderModel
    step: int = 0
    seed: int = 0
    optimizer: dict = field(default_factory=dict)  # name -> array, plus "t"
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model, step=0, seed=None, optimizer=None, rng_state=None, extra=None):
    """Write a self-describing checkpoint atomically (temp file + rename)."""
    tensors = [(name, p.data) for name, p in model.named_parameters().items()]
    opt = dict(optimizer or {})
    opt_t = int(opt.pop("t", 0))
    tensors += [(f"optimizer/{name}", arr) for name, arr in sorted(opt.items())]
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "seed": int(model.seed if seed is None else seed),
        "model_seed": int(model.seed),
        "optimizer_t": opt_t,
        "rng_state": rng_state,
        "vocab": model.vocab.itos if model.vocab is not None else None,
        "bpe": [list(m) for m in model.bpe.merges] if model.bpe is not None else None,
        "extra": extra or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            for _, arr in tensors:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    body = start + hlen
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=body + e["offset"]).reshape(e["shape"]).astype(np.float64)
    config = ModelConfig(**header["config"])
    vocab = None
    if header["vocab"] is not None:
        vocab = Vocabulary(header["vocab"], with_mask="<mask>" in header["vocab"])
    bpe = BpeModel(header["bpe"]) if header["bpe"] is not None else None
    model = SharedEncoderModel(config, header["model_seed"], vocab, bpe)
    for name, p in model.named_parameters().items():
        p.data[...] = arrays[name]
    optimizer = {k[len("optimizer/"):]: v for k, v in arrays.items() if k.startswith("optimizer/")}
    if optimizer or header["optimizer_t"]:
        optimizer["t"] = header["optimizer_t"]
    return Checkpoint(model, header["step"], header["seed"], optimizer, header["rng_state"], header["extra"])
