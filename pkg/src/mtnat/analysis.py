"""Encoder analysis: probing classifiers and CCA representation similarity."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ConfigError, tokenize
from .model import Checkpoint, load_checkpoint
from .reports import sha256_text
from .tensor import Tape, Tensor, no_grad

# ------------------------------------------------------------ representations


@dataclass
class RepresentationMatrix:
    matrix: np.ndarray
    ids: list
    pooling: str = "mean"
    checkpoint_id: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise ValueError(f"representation matrix must be n x d with n >= 2, got {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError(f"{len(self.ids)} sentence ids for {self.matrix.shape[0]} rows")
        if not np.isfinite(self.matrix).all():
            raise ValueError("representation matrix has non-finite entries")

    @property
    def shape(self):
        return self.matrix.shape


def _model_of(source):
    if isinstance(source, Checkpoint):
        return source.model, f"step{source.step}"
    if isinstance(source, (str, Path)):
        ckpt = load_checkpoint(source)
        return ckpt.model, Path(source).name
    return source, ""


def extract_representations(source, sentences, pooling="mean", ids=None, batch_size=64, checkpoint_id=None):
    """Pool final-layer encoder states over the non-PAD positions of each sentence.

    ``source`` is a model, a :class:`Checkpoint` or a checkpoint path.
    """
    if pooling not in ("mean", "max"):
        raise ValueError(f"pooling must be 'mean' or 'max', got {pooling!r}")
    sentences = list(sentences)
    if not sentences:
        raise ValueError("extract_representations: no sentences")
    model, default_id = _model_of(source)
    if model.vocab is None:
        raise ValueError("extract_representations: model has no vocabulary")
    encoded = [model.vocab.encode(tokenize(s, model.bpe)) for s in sentences]
    if any(not e for e in encoded):
        raise ValueError("extract_representations: empty sentence")
    rows = []
    with no_grad():
        for start in range(0, len(encoded), batch_size):
            chunk = encoded[start : start + batch_size]
            src = np.zeros((len(chunk), max(map(len, chunk))), dtype=np.int64)
            for i, e in enumerate(chunk):
                src[i, : len(e)] = e
            enc = model.encode(src)
            h, keep = enc.states.data, ~enc.pad
            if pooling == "mean":
                rows.append((h * keep[..., None]).sum(axis=1) / keep.sum(axis=1, keepdims=True))
            else:
                rows.append(np.where(keep[..., None], h, -np.inf).max(axis=1))
    ids = list(range(len(sentences))) if ids is None else list(ids)
    return RepresentationMatrix(np.concatenate(rows), ids, pooling, checkpoint_id or default_id)


# ------------------------------------------------------------- probing tasks


@dataclass(frozen=True)
class ProbingTask:
    id: str
    category: str
    labels: tuple | None = None  # None: label set comes from the data file


SELEN_BUCKETS = 6
PROBING_TASKS = {
    "SeLen": ProbingTask("SeLen", "Surface", tuple(str(i) for i in range(SELEN_BUCKETS))),
    "WC": ProbingTask("WC", "Surface"),
    "TrDep": ProbingTask("TrDep", "Syntactic"),
    "ToCo": ProbingTask("ToCo", "Syntactic"),
    "BShif": ProbingTask("BShif", "Syntactic", ("O", "I")),
    "Tense": ProbingTask("Tense", "Semantic"),
    "SubN": ProbingTask("SubN", "Semantic"),
    "ObjN": ProbingTask("ObjN", "Semantic"),
    "SoMo": ProbingTask("SoMo", "Semantic"),
    "CoIn": ProbingTask("CoIn", "Semantic"),
}
SYNTHETIC_TASKS = ("SeLen", "WC", "BShif")
SPLITS = ("tr", "va", "te")


@dataclass
class ProbingDataset:
    task: ProbingTask
    splits: dict  # split -> list of (sentence, label)

    def __post_init__(self):
        seen = set()
        for name, pairs in self.splits.items():
            if name not in SPLITS:
                raise ValueError(f"unknown split {name!r}")
            for sentence, label in pairs:
                if self.task.labels is not None and label not in self.task.labels:
                    raise ValueError(f"{self.task.id}: label {label!r} not in {self.task.labels}")
                if sentence in seen:
                    raise ValueError(f"{self.task.id}: sentence appears twice across splits: {sentence!r}")
                seen.add(sentence)

    def sentences(self, split):
        return [s for s, _ in self.splits.get(split, [])]

    def labels(self, split):
        return [lab for _, lab in self.splits.get(split, [])]

    @property
    def label_set(self):
        if self.task.labels is not None:
            return list(self.task.labels)
        return sorted({lab for pairs in self.splits.values() for _, lab in pairs})

    def save_tsv(self, path):
        lines = [f"{split}\t{lab}\t{s}" for split in SPLITS for s, lab in self.splits.get(split, [])]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load_tsv(cls, path, task):
        task = PROBING_TASKS[task] if isinstance(task, str) else task
        splits = {s: [] for s in SPLITS}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in splits:
                raise ValueError(f"{path}:{n}: expected 'split<TAB>label<TAB>sentence' with split in {SPLITS}")
            splits[parts[0]].append((parts[2], parts[1]))
        return cls(task, splits)


def bigram_shift(tokens, i):
    """Swap tokens ``i`` and ``i + 1``."""
    out = list(tokens)
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _unique(sentences):
    seen, out = set(), []
    for s in sentences:
        s = " ".join(s.split())
        if s and s not in seen:
            seen.add(s)
            out.append(s)
    return out


def length_buckets(lengths, n_buckets=SELEN_BUCKETS):
    """Upper edges of equal-frequency buckets over integer ``lengths``.

    Bucket ``j`` holds lengths in ``(edges[j-1], edges[j]]``. Ties keep
    equal lengths together, so buckets are only approximately equal in size.
    """
    values = np.sort(np.asarray(lengths))
    n = len(values)
    edges = []
    for j in range(1, n_buckets):
        edge = int(values[math.ceil(j * n / n_buckets) - 1])
        if edges and edge <= edges[-1]:
            raise ConfigError(f"too few distinct lengths to fill {n_buckets} buckets")
        edges.append(edge)
    if edges and values[-1] <= edges[-1]:
        raise ConfigError(f"too few distinct lengths to fill {n_buckets} buckets")
    edges.append(int(values[-1]))
    return edges


def _balance(pairs, rng):
    by_label = {}
    for p in pairs:
        by_label.setdefault(p[1], []).append(p)
    size = min(len(v) for v in by_label.values())
    out = []
    for label in sorted(by_label):
        group = by_label[label]
        keep = np.sort(rng.choice(len(group), size=size, replace=False))
        out.extend(group[i] for i in keep)
    return out


def _split(pairs, task, rng):
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    n_tr, n_va = int(0.8 * len(pairs)), int(0.1 * len(pairs))
    return ProbingDataset(
        task,
        {"tr": pairs[:n_tr], "va": pairs[n_tr : n_tr + n_va], "te": pairs[n_tr + n_va :]},
    )


def generate_probing_data(task, corpus, seed=0, n_words=10, min_per_class=2):
    """Build a synthetic probing set from source sentences.

    SeLen: six length buckets cut at length quantiles, then downsampled to
    equal size. WC: which of ``n_words`` mid-frequency words the sentence
    contains (sentences with two or more of them are dropped). BShif: ``I``
    if one adjacent pair was swapped, ``O`` otherwise, 50/50.
    Splits are 80/10/10 after a seeded shuffle.
    """
    if task not in SYNTHETIC_TASKS:
        raise ValueError(f"no synthetic generator for {task!r}; use one of {SYNTHETIC_TASKS} or load a TSV")
    sentences = _unique(corpus.sources if hasattr(corpus, "sources") else corpus)
    rng = np.random.default_rng([seed, SYNTHETIC_TASKS.index(task)])
    spec = PROBING_TASKS[task]

    if task == "SeLen":
        if len(sentences) < SELEN_BUCKETS * min_per_class:
            raise ConfigError(f"SeLen needs at least {SELEN_BUCKETS * min_per_class} distinct sentences")
        lengths = [len(s.split()) for s in sentences]
        edges = length_buckets(lengths)
        labels = [str(int(np.searchsorted(edges, n))) for n in lengths]
        pairs = _balance(list(zip(sentences, labels)), rng)
    elif task == "WC":
        freq = Counter(w for s in sentences for w in set(s.split()))
        ranked = sorted(freq, key=lambda w: (-freq[w], w))
        if len(ranked) < n_words:
            raise ConfigError(f"WC needs at least {n_words} distinct words, corpus has {len(ranked)}")
        mid = len(ranked) // 2
        lo = min(max(mid - n_words // 2, 0), len(ranked) - n_words)
        chosen = set(ranked[lo : lo + n_words])
        pairs = []
        for s in sentences:
            hits = chosen.intersection(s.split())
            if len(hits) == 1:
                pairs.append((s, hits.pop()))
        spec = ProbingTask("WC", "Surface", tuple(sorted(chosen)))
        counts = Counter(lab for _, lab in pairs)
        if len(counts) < n_words or min(counts.values()) < min_per_class:
            raise ConfigError("WC: corpus too small to give every chosen word enough sentences")
    else:
        pairs, seen = [], set()
        for s in sentences:
            toks = s.split()
            if len(toks) < 2:
                continue
            if rng.random() < 0.5:
                i = int(rng.integers(0, len(toks) - 1))
                if toks[i] == toks[i + 1]:
                    continue
                out, label = " ".join(bigram_shift(toks, i)), "I"
            else:
                out, label = s, "O"
            if out not in seen:
                seen.add(out)
                pairs.append((out, label))
        if len({lab for _, lab in pairs}) < 2:
            raise ConfigError("BShif: corpus too small to produce both labels")
    return _split(pairs, spec, rng)


# -------------------------------------------------------------------- probes


@dataclass
class ProbeConfig:
    hidden: int = 50
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    patience: int = 10
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.hidden < 1 or self.epochs < 1 or self.batch_size < 1 or not self.seeds:
            raise ValueError("probe config: hidden, epochs, batch_size must be >= 1 and seeds non-empty")


@dataclass
class ProbeReport:
    task: str
    accuracy: float  # mean test accuracy in percent
    per_seed: list
    train_accuracy: float
    config: dict
    checkpoint_id: str = ""
    best_epochs: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _mlp_logits(x, w1, b1, w2, b2):
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2), b2)


def _accuracy(x, y, params):
    with no_grad():
        pred = np.argmax(_mlp_logits(Tensor(x), *params).data, axis=1)
    return 100.0 * float((pred == y).mean())


def _fit_probe(xtr, ytr, xva, yva, n_classes, cfg, seed):
    from .training import Adam

    rng = np.random.default_rng([seed, 11])
    d = xtr.shape[1]
    b1 = math.sqrt(6.0 / (d + cfg.hidden))
    b2 = math.sqrt(6.0 / (cfg.hidden + n_classes))
    params = {
        "w1": Tensor(rng.uniform(-b1, b1, (d, cfg.hidden)), True, "w1"),
        "b1": Tensor(np.zeros(cfg.hidden), True, "b1"),
        "w2": Tensor(rng.uniform(-b2, b2, (cfg.hidden, n_classes)), True, "w2"),
        "b2": Tensor(np.zeros(n_classes), True, "b2"),
    }
    opt = Adam(params, beta1=0.9, beta2=0.999, eps=1e-8)
    plist = list(params.values())
    best = (-1.0, 0, [p.data.copy() for p in plist])
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(xtr))
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = T.cross_entropy(_mlp_logits(Tensor(xtr[rows]), *plist), ytr[rows])
            T.backward(loss, tape)
            opt.step(cfg.lr)
        acc = _accuracy(xva, yva, plist)
        if acc > best[0]:
            best, stale = (acc, epoch, [p.data.copy() for p in plist]), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, saved in zip(plist, best[2]):
        p.data[...] = saved
    return plist, best[1]


def train_probe(train, valid, test, labels, cfg=None, task="", label_set=None):
    """Fit a frozen-feature MLP probe and report mean test accuracy over seeds.

    ``train``/``valid``/``test`` are :class:`RepresentationMatrix` objects
    and ``labels`` maps split name (``tr``/``va``/``te``) to label lists.
    Features are standardised with training-split statistics. The epoch
    with the best validation accuracy is kept for each seed.
    """
    cfg = cfg or ProbeConfig()
    reps = {"tr": train, "va": valid, "te": test}
    for split, rep in reps.items():
        if len(labels[split]) != rep.shape[0]:
            raise ValueError(f"probe: {rep.shape[0]} rows but {len(labels[split])} labels in split {split!r}")
    classes = list(label_set) if label_set is not None else sorted(set(labels["tr"]))
    if len(set(labels["tr"])) < 2:
        raise ValueError("probe: training split has a single class")
    index = {c: i for i, c in enumerate(classes)}
    try:
        ys = {k: np.array([index[lab] for lab in labels[k]], dtype=np.int64) for k in reps}
    except KeyError as exc:
        raise ValueError(f"probe: label {exc.args[0]!r} outside the label set") from None
    mu = train.matrix.mean(axis=0)
    sd = train.matrix.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = {k: (rep.matrix - mu) / sd for k, rep in reps.items()}
    per_seed, train_acc, epochs = [], [], []
    for seed in cfg.seeds:
        params, best_epoch = _fit_probe(xs["tr"], ys["tr"], xs["va"], ys["va"], len(classes), cfg, seed)
        per_seed.append(_accuracy(xs["te"], ys["te"], params))
        train_acc.append(_accuracy(xs["tr"], ys["tr"], params))
        epochs.append(best_epoch)
    return ProbeReport(
        task=task,
        accuracy=float(np.mean(per_seed)),
        per_seed=per_seed,
        train_accuracy=float(np.mean(train_acc)),
        config={**asdict(cfg), "seeds": list(cfg.seeds)},
        checkpoint_id=train.checkpoint_id,
        best_epochs=epochs,
    )


def probe(source, dataset, cfg=None, pooling="mean"):
    """Extract representations for every split of ``dataset`` and train a probe."""
    reps = {
        split: extract_representations(source, dataset.sentences(split), pooling)
        for split in SPLITS
    }
    labels = {split: dataset.labels(split) for split in SPLITS}
    return train_probe(reps["tr"], reps["va"], reps["te"], labels, cfg, dataset.task.id, dataset.label_set)


# ----------------------------------------------------------------------- CCA


def _whiten(x, keep):
    """Orthonormal basis of the centred column space covering ``keep`` of the variance."""
    x = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    var = s**2
    total = var.sum()
    if total <= 0.0:
        raise ValueError("CCA: representation has zero variance")
    tol = s[0] * max(x.shape) * np.finfo(float).eps
    rank = int((s > tol).sum())
    k = min(int(np.searchsorted(np.cumsum(var) / total, keep - 1e-12) + 1), rank)
    if k < 1:
        raise ValueError("CCA: no components left after truncation")
    return u[:, :k], x


def canonical_correlations(a, b, keep=0.99, min_ratio=5):
    """Canonical correlations (descending, clipped to [0, 1]) of two row-aligned matrices."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"CCA: row counts differ ({a.shape[0]} vs {b.shape[0]})")
    d = max(a.shape[1], b.shape[1])
    if a.shape[0] < min_ratio * d:
        raise ValueError(f"CCA: need n >= {min_ratio}*d = {min_ratio * d} rows, got {a.shape[0]}")
    ua, _ = _whiten(a, keep)
    ub, _ = _whiten(b, keep)
    rho = np.linalg.svd(ua.T @ ub, compute_uv=False)
    return np.clip(rho, 0.0, 1.0)


def _pwcca(a, b, keep):
    ua, ac = _whiten(a, keep)
    ub, _ = _whiten(b, keep)
    p, rho, _ = np.linalg.svd(ua.T @ ub, full_matrices=False)
    h = ua @ p  # canonical variates of a, unit norm
    weights = np.abs(h.T @ ac).sum(axis=1)
    weights = weights / weights.sum()
    return float(np.clip(weights @ np.clip(rho, 0.0, 1.0), 0.0, 1.0))


def cca_similarity(a, b, keep=0.99, weighting="mean"):
    """Mean canonical correlation after SVD truncation, in [0, 1].

    ``weighting="projection"`` weights each correlation by how much of
    ``a``'s activity its canonical direction accounts for.
    """
    if isinstance(a, RepresentationMatrix) and isinstance(b, RepresentationMatrix):
        if list(a.ids) != list(b.ids):
            raise ValueError("CCA: sentence ids of the two representations are not aligned")
    ma = a.matrix if isinstance(a, RepresentationMatrix) else np.asarray(a, dtype=np.float64)
    mb = b.matrix if isinstance(b, RepresentationMatrix) else np.asarray(b, dtype=np.float64)
    if weighting == "mean":
        return float(canonical_correlations(ma, mb, keep).mean())
    if weighting == "projection":
        canonical_correlations(ma, mb, keep)  # same validation
        return _pwcca(ma, mb, keep)
    raise ValueError(f"unknown CCA weighting {weighting!r}")


@dataclass
class CcaReport:
    steps: list
    scores: list
    components: list
    probe_set: str
    label: str = ""

    def __post_init__(self):
        for s in self.scores:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"CCA score {s} outside [0, 1]")

    @property
    def final(self):
        return self.scores[-1]

    def to_dict(self):
        return asdict(self)


def _as_checkpoints(seq):
    out = []
    for item in seq:
        if isinstance(item, Checkpoint):
            out.append(item)
        elif isinstance(item, (str, Path)):
            out.append(load_checkpoint(item))
        else:
            raise TypeError(f"expected a Checkpoint or path, got {type(item).__name__}")
    return out


def cca_trajectory(ckpts_a, ckpts_b, sentences, pooling="mean", keep=0.99, weighting="mean", label=""):
    """Similarity of two encoders at each matching checkpoint step."""
    a, b = _as_checkpoints(ckpts_a), _as_checkpoints(ckpts_b)
    steps_a, steps_b = [c.step for c in a], [c.step for c in b]
    if steps_a != steps_b:
        raise ValueError(f"CCA trajectory: checkpoint steps differ ({steps_a} vs {steps_b})")
    sentences = list(sentences)
    scores, comps = [], []
    for ca, cb in zip(a, b):
        ra = extract_representations(ca, sentences, pooling)
        rb = extract_representations(cb, sentences, pooling)
        rho = canonical_correlations(ra.matrix, rb.matrix, keep)
        comps.append(int(rho.size))
        scores.append(cca_similarity(ra, rb, keep, weighting))
    return CcaReport(steps_a, scores, comps, sha256_text(sentences), label)


def similarity_curves(nat, nat2, at, at2, sentences, **kw):
    """The three-curve comparison: NAT vs NAT', AT vs AT', NAT vs AT."""
    return {
        "NAT": cca_trajectory(nat, nat2, sentences, label="NAT", **kw),
        "AT": cca_trajectory(at, at2, sentences, label="AT", **kw),
        "NAT-AT": cca_trajectory(nat, at, sentences, label="NAT-AT", **kw),
    }
