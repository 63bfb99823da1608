"""Compare the numba kernels with the numpy fallback.

Times each kernel at the shapes a desk-scale training step produces, then
(optionally) a full training step in a subprocess per backend, since the
backend is fixed at import time.

    python benchmarks/bench_kernels.py [--repeat 200] [--steps 30] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mtnat.kernels import _numba as nbk
from mtnat.kernels import _numpy as npk

STEP_SNIPPET = """
import time
from mtnat.data import ToyTaskSpec, build_tokenizer, generate_toy_corpus
from mtnat.model import ModelConfig, init_model
from mtnat.training import MultiTaskLossConfig, TrainConfig, train
corpus = generate_toy_corpus(ToyTaskSpec("lexicon", 40, 3, 12, seed=0), 400, seed=1)
bpe, vocab = build_tokenizer(corpus, 400)
model = init_model(ModelConfig(vocab_size=len(vocab)), seed=0, vocab=vocab, bpe=bpe)
train(model, corpus, TrainConfig(batch_size=16, max_steps=3), MultiTaskLossConfig())  # warm-up / JIT
t = time.perf_counter()
train(model, corpus, TrainConfig(batch_size=16, max_steps={steps}, seed=1), MultiTaskLossConfig())
print((time.perf_counter() - t) / {steps})
"""


def cases(rng):
    b, h, n, d, v = 16, 4, 12, 64, 85
    scores = rng.normal(size=(b * h * n, n))
    probs = npk.softmax_rows(scores)
    x = rng.normal(size=(b * n, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    _, xhat, rstd = npk.layer_norm_rows(x, gamma, beta, 1e-5)
    logits = rng.normal(size=(b * n, v))
    targets = rng.integers(0, v, size=b * n)
    ids = rng.integers(0, v, size=b * n)
    stats = rng.integers(0, 9, size=(200, 10)).astype(np.float64)
    idx = rng.integers(0, 200, size=(1000, 200))
    return {
        "softmax_rows": lambda k: k.softmax_rows(scores),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(probs, scores),
        "layer_norm_rows": lambda k: k.layer_norm_rows(x, gamma, beta, 1e-5),
        "layer_norm_rows_backward": lambda k: k.layer_norm_rows_backward(x, xhat, rstd, gamma),
        "cross_entropy_rows": lambda k: k.cross_entropy_rows(logits, targets, 0, 0.1),
        "scatter_add_rows": lambda k: k.scatter_add_rows(v, ids, x),
        "bootstrap_sums (1000x200)": lambda k: k.bootstrap_sums(stats, idx),
    }


def time_kernels(repeat):
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        fn(nbk)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn(npk), number=1, repeat=repeat))
        t_nb = min(timeit.repeat(lambda: fn(nbk), number=1, repeat=repeat))
        rows.append({"kernel": name, "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6, "speedup": t_np / t_nb})
    return rows


def time_step(backend, steps):
    env = dict(os.environ, MTNAT_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=30, help="training steps per backend; 0 skips the step benchmark")
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    rows = time_kernels(args.repeat)
    print(f"{'kernel':30s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:30s} {r['numpy_us']:10.1f} {r['numba_us']:10.1f} {r['speedup']:8.2f}")
    result = {"kernels": rows}
    if args.steps:
        step = {b: time_step(b, args.steps) for b in ("numpy", "numba")}
        result["train_step_ms"] = {b: 1e3 * t for b, t in step.items()}
        print(f"\ntraining step (batch 16, default model): numpy {1e3 * step['numpy']:.1f} ms, "
              f"numba {1e3 * step['numba']:.1f} ms")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2)
    return result


if __name__ == "__main__":
    main()
