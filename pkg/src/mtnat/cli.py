"""Command-line driver: ``mtnat <command> ...``.

Commands: gen-data, train, distill, translate, probe, cca, score, run.
``MTNAT_SEED`` supplies the seed when ``--seed`` is not given.
"""
from __future__ import annotations

import argparse
import graphlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    PROBING_TASKS,
    SYNTHETIC_TASKS,
    ProbeConfig,
    ProbingDataset,
    cca_trajectory,
    generate_probing_data,
    probe,
)
from .data import ParallelCorpus, ToyTaskSpec, build_tokenizer, generate_toy_corpus, read_lines
from .decoding import DecodeConfig, translate
from .evaluation import corpus_bleu, paired_bootstrap
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .reports import atomic_write, dumps, sha256_file, write_report
from .training import MultiTaskLossConfig, TrainConfig, distill_corpus, train

log = logging.getLogger("mtnat")

EXIT_OK, EXIT_ERROR, EXIT_NOT_SIGNIFICANT = 0, 1, 3


class StageError(RuntimeError):
    pass


def env_seed(default=0):
    raw = os.environ.get("MTNAT_SEED")
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"MTNAT_SEED must be an integer, got {raw!r}") from None


def _seed(args):
    return env_seed() if args.seed is None else args.seed


def decoders_for(lam, choice="auto"):
    """Single-task runs (lambda 0 or 1) get only the decoder they train."""
    if choice == "both":
        return ("at", "nat")
    if choice in ("at", "nat"):
        return (choice,)
    if lam == 0.0:
        return ("nat",)
    if lam == 1.0:
        return ("at",)
    return ("at", "nat")


def _load_corpus(prefix):
    return ParallelCorpus.load(prefix)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    out = Path(args.out)
    if args.probing:
        if not args.corpus:
            raise SystemExit("gen-data --probing needs --corpus (a .src file or corpus prefix)")
        src = Path(args.corpus)
        sentences = read_lines(src if src.suffix == ".src" or src.is_file() else f"{src}.src")
        ds = generate_probing_data(args.probing, sentences, seed=_seed(args))
        out.parent.mkdir(parents=True, exist_ok=True)
        ds.save_tsv(out)
        sizes = {k: len(v) for k, v in ds.splits.items()}
        print(f"wrote {args.probing} probing data to {out} {sizes}")
        return EXIT_OK
    spec = ToyTaskSpec(args.task, args.vocab_size, args.min_len, args.max_len, seed=args.task_seed)
    corpus = generate_toy_corpus(spec, args.n, seed=_seed(args))
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.save(out)
    print(f"wrote {len(corpus)} {args.task} pairs to {out}.src/.tgt")
    return EXIT_OK


def cmd_train(args):
    seed = _seed(args)
    if args.data:
        corpus = _load_corpus(args.data)
    else:
        spec = ToyTaskSpec(args.task, args.vocab_size, args.min_len, args.max_len, seed=args.task_seed)
        corpus = generate_toy_corpus(spec, args.n, seed=args.data_seed)
    bpe, vocab = build_tokenizer(corpus, args.merges)
    cfg = ModelConfig(
        vocab_size=len(vocab), d_model=args.d_model, n_heads=args.heads, d_ff=args.d_ff,
        enc_layers=args.enc_layers, at_layers=args.dec_layers, nat_layers=args.dec_layers,
        max_positions=args.max_positions, dropout=args.dropout, length_mode=args.length_mode,
        decoders=decoders_for(args.lam, args.decoders),
    )
    model = init_model(cfg, seed=seed if args.init_seed is None else args.init_seed, vocab=vocab, bpe=bpe)
    tc = TrainConfig(
        lr=args.lr, warmup=args.warmup, batch_size=args.batch_size, max_steps=args.steps,
        checkpoint_interval=args.checkpoint_interval, seed=seed, max_len=args.max_positions,
    )
    lc = MultiTaskLossConfig(lam=args.lam, label_smoothing=args.label_smoothing)
    out = Path(args.out)
    result = train(model, corpus, tc, lc, out_dir=out, resume=args.resume, log_every=args.log_every)
    final = save_checkpoint(
        out / "model.ckpt", model, step=tc.max_steps, seed=seed,
        extra={"train": vars(tc), "loss": vars(lc), "skipped": result.skipped},
    )
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {tc.max_steps} steps (lambda={args.lam}, decoders={','.join(cfg.decoders)}); "
          f"final L={last.get('L', float('nan')):.4f}; checkpoint {final}")
    return EXIT_OK


def cmd_distill(args):
    teacher = load_checkpoint(args.ckpt).model
    corpus = _load_corpus(args.data)
    result = distill_corpus(teacher, corpus, beam=args.beam, batch_size=args.batch_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.corpus.save(out)
    print(f"distilled {len(result.corpus)} pairs ({result.fallbacks} fallbacks) to {out}.src/.tgt")
    return EXIT_OK


def cmd_translate(args):
    model = load_checkpoint(args.ckpt).model
    cfg = DecodeConfig(beam=args.beam, max_len=args.max_len, iterations=args.iterations, length_beam=args.length_beam)
    texts, _ = translate(model, read_lines(args.inp), args.mode, cfg)
    atomic_write(args.out, "".join(t + "\n" for t in texts))
    print(f"translated {len(texts)} sentences with {args.mode} to {args.out}")
    return EXIT_OK


def cmd_score(args):
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    inputs = {"hyp": sha256_file(args.hyp), "ref": sha256_file(args.ref)}
    payload = {"bleu": corpus_bleu(hyps, refs).to_dict()}
    code = EXIT_OK
    if args.hyp_b:
        hyps_b = read_lines(args.hyp_b)
        inputs["hyp_b"] = sha256_file(args.hyp_b)
        payload["bleu_b"] = corpus_bleu(hyps_b, refs).to_dict()
        if args.bootstrap:
            sig = paired_bootstrap(hyps, hyps_b, refs, args.bootstrap, _seed(args))
            payload["significance"] = sig.to_dict()
            if args.threshold is not None:
                code = EXIT_OK if sig.p_value < args.threshold else EXIT_NOT_SIGNIFICANT
    elif args.threshold is not None:
        raise SystemExit("score --threshold needs --hyp-b and --bootstrap")
    if args.out:
        write_report(args.out, "score", payload, inputs)
    line = f"BLEU {payload['bleu']['bleu']:.2f}"
    if "bleu_b" in payload:
        line += f" vs {payload['bleu_b']['bleu']:.2f}"
    if "significance" in payload:
        s = payload["significance"]
        line += f"  p={s['p_value']:.4f} {s['flag']}".rstrip()
    print(line)
    return code


def cmd_probe(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = ProbingDataset.load_tsv(args.data, args.task)
    cfg = ProbeConfig(hidden=args.hidden, epochs=args.epochs, seeds=tuple(range(args.probe_seeds)))
    report = probe(ckpt, ds, cfg, pooling=args.pooling)
    report.checkpoint_id = Path(args.ckpt).name
    if args.out:
        inputs = {"ckpt": sha256_file(args.ckpt), "data": sha256_file(args.data)}
        write_report(args.out, "probe", report.to_dict(), inputs)
    print(f"{args.task} probe accuracy {report.accuracy:.2f} (train {report.train_accuracy:.2f})")
    return EXIT_OK


def _ckpt_files(directory):
    files = sorted(Path(directory).glob("step_*.ckpt"))
    if not files:
        raise SystemExit(f"no step_*.ckpt files in {directory}")
    return files


def cmd_cca(args):
    a, b = _ckpt_files(args.ckpts_a), _ckpt_files(args.ckpts_b)
    if args.final_only:
        a, b = a[-1:], b[-1:]
    sentences = read_lines(args.sentences)
    report = cca_trajectory(a, b, sentences, pooling=args.pooling, weighting=args.weighting)
    if args.out:
        inputs = {f"a/{p.name}": sha256_file(p) for p in a}
        inputs.update({f"b/{p.name}": sha256_file(p) for p in b})
        inputs["sentences"] = sha256_file(args.sentences)
        write_report(args.out, "cca", report.to_dict(), inputs)
    for step, score in zip(report.steps, report.scores):
        print(f"step {step}: cca {score:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "translate": cmd_translate,
    "score": cmd_score,
    "probe": cmd_probe,
    "cca": cmd_cca,
}


# ------------------------------------------------------------------ manifest

MANIFEST_SCHEMA = 1
# where a stage's primary output goes inside its directory
STAGE_OUT = {
    "gen-data": "corpus",
    "train": ".",
    "distill": "corpus",
    "translate": "hyp.txt",
    "score": "report.json",
    "probe": "report.json",
    "cca": "report.json",
}
STAGE_RECORD = ".stage.json"
PROV_SUFFIX = ".prov.json"


def default_manifest(task="copy", steps=300, n=400, seed=0, interval=None):
    """A complete pipeline: data, teacher, distillation, MT and NAT models, scoring, probing, CCA."""
    interval = interval or max(steps // 2, 1)
    common = {"task": task, "steps": steps, "checkpoint-interval": interval, "batch-size": 16}
    return {
        "schema_version": MANIFEST_SCHEMA,
        "seed": seed,
        "stages": [
            {"name": "data", "command": "gen-data", "args": {"task": task, "n": n}},
            {"name": "test", "command": "gen-data", "args": {"task": task, "n": 50, "seed": seed + 1000}},
            {"name": "probe-sentences", "command": "gen-data", "args": {"task": task, "n": 400, "seed": seed + 2000}},
            {"name": "train-at", "command": "train", "args": {**common, "lambda": 1.0, "data": "@data/corpus"}},
            {"name": "distill", "command": "distill",
             "args": {"ckpt": "@train-at/model.ckpt", "data": "@data/corpus", "beam": 2}},
            {"name": "train-multitask", "command": "train",
             "args": {**common, "lambda": 0.5, "data": "@distill/corpus"}},
            {"name": "train-nat-baseline", "command": "train",
             "args": {**common, "lambda": 0.0, "data": "@distill/corpus"}},
            {"name": "translate-multitask", "command": "translate",
             "args": {"ckpt": "@train-multitask/model.ckpt", "mode": "mask-predict", "in": "@test/corpus.src"}},
            {"name": "translate-nat-baseline", "command": "translate",
             "args": {"ckpt": "@train-nat-baseline/model.ckpt", "mode": "mask-predict", "in": "@test/corpus.src"}},
            {"name": "score", "command": "score",
             "args": {"hyp": "@translate-multitask/hyp.txt", "hyp-b": "@translate-nat-baseline/hyp.txt",
                      "ref": "@test/corpus.tgt", "bootstrap": 1000}},
            {"name": "probe-data", "command": "gen-data",
             "args": {"probing": "SeLen", "corpus": "@probe-sentences/corpus.src"}},
            {"name": "probe-at", "command": "probe",
             "args": {"ckpt": "@train-at/model.ckpt", "task": "SeLen", "data": "@probe-data/probe.tsv",
                      "probe-seeds": 2, "epochs": 30}},
            {"name": "probe-nat", "command": "probe",
             "args": {"ckpt": "@train-nat-baseline/model.ckpt", "task": "SeLen", "data": "@probe-data/probe.tsv",
                      "probe-seeds": 2, "epochs": 30}},
            {"name": "cca", "command": "cca",
             "args": {"ckpts-a": "@train-nat-baseline/checkpoints", "ckpts-b": "@train-at/checkpoints",
                      "sentences": "@probe-sentences/corpus.src"}},
        ],
    }


def load_manifest(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StageError(f"manifest {path}: invalid JSON ({exc})") from None
    return validate_manifest(doc)


def _refs(value):
    if isinstance(value, str) and value.startswith("@"):
        return [value[1:]]
    if isinstance(value, list):
        return [r for v in value for r in _refs(v)]
    return []


def validate_manifest(doc):
    if not isinstance(doc, dict):
        raise StageError("manifest must be a JSON object")
    if doc.get("schema_version") != MANIFEST_SCHEMA:
        raise StageError(f"manifest schema_version must be {MANIFEST_SCHEMA}, got {doc.get('schema_version')!r}")
    stages = doc.get("stages", [])
    names = set()
    for st in stages:
        name, command = st.get("name"), st.get("command")
        if not name or "/" in name or name.startswith("."):
            raise StageError(f"invalid stage name {name!r}")
        if name in names:
            raise StageError(f"duplicate stage name {name!r}")
        if command not in COMMANDS:
            raise StageError(f"stage {name!r}: unknown command {command!r}")
        names.add(name)
    graph = {}
    for st in stages:
        deps = set()
        for value in st.get("args", {}).values():
            for ref in _refs(value):
                dep = ref.split("/", 1)[0]
                if dep not in names:
                    raise StageError(f"stage {st['name']!r}: reference @{ref} names no stage")
                deps.add(dep)
        graph[st["name"]] = deps
    try:
        order = list(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        raise StageError(f"manifest stages form a cycle: {exc.args[1]}") from None
    doc = dict(doc)
    doc["_order"] = order
    return doc


def _tree_checksums(root, exclude_prov=True):
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.name == STAGE_RECORD or (exclude_prov and p.name.endswith(PROV_SUFFIX)):
            continue
        out[p.relative_to(root).as_posix()] = sha256_file(p)
    return out


def _input_checksum(path):
    path = Path(path)
    if path.is_dir():
        return {"dir": _tree_checksums(path)}
    for candidate in (path, Path(f"{path}.src")):
        if candidate.is_file():
            if candidate == path:
                return sha256_file(path)
            tgt = Path(f"{path}.tgt")
            return {"src": sha256_file(candidate), "tgt": sha256_file(tgt) if tgt.is_file() else None}
    # probing TSVs are addressed by prefix too
    return sha256_file(path)


def _argv(command, args, out):
    argv = [command]
    for key, value in sorted(args.items()):
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        else:
            argv += [flag, str(value)]
    argv += ["--out", str(out)]
    return argv


def run_manifest(doc, out_dir, seed=None, force=False):
    """Execute manifest stages in dependency order; returns a {stage: status} map."""
    doc = validate_manifest(doc) if "_order" not in doc else doc
    stages = {st["name"]: st for st in doc.get("stages", [])}
    if not stages:
        return {}
    out_dir = Path(out_dir)
    global_seed = doc.get("seed", env_seed()) if seed is None else seed
    status = {}
    for name in doc["_order"]:
        st = stages[name]
        command, args = st["command"], dict(st.get("args", {}))
        args.setdefault("seed", global_seed)
        resolved, inputs = {}, {}
        for key, value in args.items():
            if isinstance(value, str) and value.startswith("@"):
                path = out_dir / value[1:]
                if not (path.exists() or Path(f"{path}.src").exists()):
                    raise StageError(f"stage {name!r}: input {value} was not produced")
                resolved[key] = str(path)
                inputs[value] = _input_checksum(path)
            else:
                resolved[key] = value
        key_doc = {"command": command, "args": args, "inputs": inputs, "version": __version__}
        stage_dir = out_dir / name
        record_path = stage_dir / STAGE_RECORD
        if not force and record_path.is_file():
            record = json.loads(record_path.read_text(encoding="utf-8"))
            if record.get("key") == key_doc and record.get("outputs") == _tree_checksums(stage_dir):
                status[name] = "skipped"
                log.info("stage %s: up to date", name)
                continue
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True)
        target = stage_dir / ("probe.tsv" if command == "gen-data" and args.get("probing") else STAGE_OUT[command])
        argv = _argv(command, resolved, target)
        log.info("stage %s: %s", name, " ".join(argv))
        try:
            code = main(argv)
        except SystemExit as exc:
            raise StageError(f"stage {name!r} failed: {exc}") from None
        except Exception as exc:
            raise StageError(f"stage {name!r} failed: {type(exc).__name__}: {exc}") from exc
        if code not in (EXIT_OK, EXIT_NOT_SIGNIFICANT):
            raise StageError(f"stage {name!r} exited with status {code}")
        outputs = _tree_checksums(stage_dir)
        for rel, digest in outputs.items():
            prov = {"stage": name, "command": command, "args": args, "inputs": inputs, "sha256": digest}
            atomic_write(stage_dir / f"{rel}{PROV_SUFFIX}", dumps(prov))
        atomic_write(record_path, dumps({"key": key_doc, "outputs": outputs}))
        status[name] = "ran"
    return status


def cmd_run(args):
    if args.default:
        doc = validate_manifest(default_manifest(args.task, args.steps))
    elif args.manifest:
        doc = load_manifest(args.manifest)
    else:
        raise SystemExit("run needs a manifest file or --default")
    out = args.out or doc.get("output_dir") or "mtnat-out"
    try:
        status = run_manifest(doc, out, seed=args.seed, force=args.force)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, state in status.items():
        print(f"{name}: {state}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="mtnat", description="Multi-task non-autoregressive translation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def task_args(sp):
        sp.add_argument("--task", choices=["copy", "reverse", "lexicon"], default="lexicon")
        sp.add_argument("--vocab-size", type=int, default=40)
        sp.add_argument("--min-len", type=int, default=3)
        sp.add_argument("--max-len", type=int, default=12)
        sp.add_argument("--task-seed", type=int, default=0, help="seed of the lexicon itself")

    g = sub.add_parser("gen-data", help="write a synthetic parallel corpus or a probing TSV")
    task_args(g)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int)
    g.add_argument("--probing", choices=SYNTHETIC_TASKS, help="write probing data instead of a corpus")
    g.add_argument("--corpus", help="source sentences for --probing")
    g.add_argument("--out", required=True, help="corpus prefix (writes .src/.tgt) or TSV path")

    t = sub.add_parser("train", help="train a multi-task, NAT-only or AT-only model")
    task_args(t)
    t.add_argument("--lambda", dest="lam", type=float, default=0.5)
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--seed", type=int)
    t.add_argument("--init-seed", type=int, help="parameter init seed (defaults to --seed)")
    t.add_argument("--data", help="corpus prefix; generated from --task when omitted")
    t.add_argument("--n", type=int, default=2000)
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--merges", type=int, default=400)
    t.add_argument("--decoders", choices=["auto", "both", "at", "nat"], default="auto")
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--d-ff", type=int, default=128)
    t.add_argument("--enc-layers", type=int, default=2)
    t.add_argument("--dec-layers", type=int, default=2)
    t.add_argument("--max-positions", type=int, default=64)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--length-mode", choices=["absolute", "offset"], default="absolute",
                   help="length head target: the length itself or its offset from the source length")
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--warmup", type=int, default=400)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--label-smoothing", type=float, default=0.1)
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=0)
    t.add_argument("--out", required=True)

    d = sub.add_parser("distill", help="replace targets with an AT teacher's beam output")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--beam", type=int, default=4)
    d.add_argument("--batch-size", type=int, default=64)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)

    tr = sub.add_parser("translate", help="decode a file of source sentences")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--mode", choices=["at", "mask-predict"], default="mask-predict")
    tr.add_argument("--iterations", type=int, default=4)
    tr.add_argument("--length-beam", type=int, default=3)
    tr.add_argument("--beam", type=int, default=4)
    tr.add_argument("--max-len", type=int, default=64)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--in", dest="inp", required=True)
    tr.add_argument("--out", required=True)

    s = sub.add_parser("score", help="corpus BLEU and paired bootstrap significance")
    s.add_argument("--hyp", required=True)
    s.add_argument("--hyp-b")
    s.add_argument("--ref", required=True)
    s.add_argument("--bootstrap", type=int, default=1000)
    s.add_argument("--seed", type=int)
    s.add_argument("--threshold", type=float,
                   help=f"exit {EXIT_NOT_SIGNIFICANT} unless hyp beats hyp-b at p < threshold")
    s.add_argument("--out")

    pr = sub.add_parser("probe", help="train a probing classifier on frozen encoder states")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--task", choices=sorted(PROBING_TASKS), required=True)
    pr.add_argument("--data", required=True, help="TSV: split<TAB>label<TAB>sentence")
    pr.add_argument("--pooling", choices=["mean", "max"], default="mean")
    pr.add_argument("--hidden", type=int, default=50)
    pr.add_argument("--epochs", type=int, default=100)
    pr.add_argument("--probe-seeds", type=int, default=5)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out")

    c = sub.add_parser("cca", help="CCA similarity between two checkpoint sequences")
    c.add_argument("--ckpts-a", required=True)
    c.add_argument("--ckpts-b", required=True)
    c.add_argument("--sentences", required=True)
    c.add_argument("--pooling", choices=["mean", "max"], default="mean")
    c.add_argument("--weighting", choices=["mean", "projection"], default="mean")
    c.add_argument("--final-only", action="store_true")
    c.add_argument("--seed", type=int)
    c.add_argument("--out")

    r = sub.add_parser("run", help="execute a JSON experiment manifest")
    r.add_argument("manifest", nargs="?")
    r.add_argument("--default", action="store_true", help="use the built-in end-to-end manifest")
    r.add_argument("--task", choices=["copy", "reverse", "lexicon"], default="copy")
    r.add_argument("--steps", type=int, default=300)
    r.add_argument("--seed", type=int)
    r.add_argument("--force", action="store_true", help="re-run stages even when up to date")
    r.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
