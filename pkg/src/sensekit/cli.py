"""Operator entry point: build-vocab, train, fit-teacher, distill, eval, nn.

Every run writes a JSON manifest alongside its outputs recording the
resolved configuration, input digests, and timestamps, so a run can be
reproduced exactly.  Exit codes: 0 success, 2 usage, 3 data/format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .corpus import Corpus, Vocabulary, build_vocab
from .evaluation import (
    eval_scws,
    eval_wsi,
    load_scws,
    load_wsi,
    nearest_neighbors,
)
from .model import ITER_MODES, ITER_SHARED
from .model_io import ModelIOError, export_text, load_model, save_model
from .teacher import (
    PosteriorStore,
    TeacherFileError,
    export_posteriors,
    fit_teacher,
    load_records,
)
from .train import (
    KD_DIRECTIONS,
    KD_PAPER,
    DistillDataError,
    TrainConfig,
    format_epoch_line,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_EPOCH_LOG_HEADER = "epoch\tmean_loss\tmean_transfer_loss\twindows"


def _default_seed() -> int:
    env = os.environ.get("SENSEKIT_SEED")
    return int(env) if env else 1


def _md5_hex(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    manifest_path: Path,
    command: str,
    config: dict,
    inputs: list[Path],
    outputs: list[Path],
    started: float,
) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _md5_hex(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _require_files(*paths: str) -> list[Path]:
    out = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise FileNotFoundError(f"input file not found: {path}")
        out.append(path)
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", nargs="+", required=True, help="corpus text file(s)")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--dim", type=int, default=300, help="embedding dimension (default 300)")
    p.add_argument("--senses", type=int, default=3, help="senses per word (default 3)")
    p.add_argument("--window", type=int, default=5, help="context radius (default 5)")
    p.add_argument("--negatives", type=int, default=10,
                   help="negative samples per pair (default 10)")
    p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate (default 0.001)")
    p.add_argument("--epochs", type=int, default=2, help="training epochs (default 2)")
    p.add_argument("--batch", type=int, default=2048, help="batch size (default 2048)")
    p.add_argument("--seed", type=int, default=None,
                   help="rng seed (default: $SENSEKIT_SEED or 1)")
    p.add_argument("--iter-context", choices=ITER_MODES, default=ITER_SHARED,
                   help="first-pass context for iterative disambiguation")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; 1 guarantees determinism")
    p.add_argument("--save-width", type=int, choices=(4, 8), default=4,
                   help="float width of the saved model (default 4)")


def _train_config(args, distill: bool) -> TrainConfig:
    return TrainConfig(
        window=args.window,
        negatives=args.negatives,
        senses=args.senses,
        dim=args.dim,
        lr=args.lr,
        alpha=getattr(args, "alpha", 1.0),
        temperature=getattr(args, "temperature", 4.0),
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed if args.seed is not None else _default_seed(),
        distill=distill,
        iter_context=args.iter_context,
        kd_direction=getattr(args, "kd_direction", KD_PAPER),
        threads=args.threads,
    )


def _run_training(args, command: str, store: PosteriorStore | None, config: TrainConfig) -> None:
    started = time.time()
    inputs = _require_files(*args.corpus, args.vocab)
    vocab = Vocabulary.load(args.vocab)
    corpus = Corpus.from_paths(args.corpus)
    print(_EPOCH_LOG_HEADER)
    params, stats = train(corpus, vocab, config, store)
    for s in stats:
        print(format_epoch_line(s))
    out = Path(args.out)
    save_model(params, vocab, out, width=args.save_width)
    if getattr(args, "text_out", None):
        export_text(params, vocab, args.text_out)
    cfg = {k: getattr(config, k) for k in config.__dataclass_fields__}
    if store is not None:
        inputs.append(Path(args.posteriors))
    _write_manifest(out.with_name(out.name + ".manifest.json"), command, cfg,
                    inputs, [out], started)


def cmd_build_vocab(args) -> None:
    started = time.time()
    inputs = _require_files(*args.corpus)
    corpus = Corpus.from_paths(args.corpus)
    if args.words:
        inputs += _require_files(args.words)
        fixed = [w for w in Path(args.words).read_text(encoding="utf-8").split() if w]
        vocab = build_vocab(corpus.token_stream(), fixed_words=fixed)
    else:
        vocab = build_vocab(corpus.token_stream(), min_count=args.min_count)
    out = Path(args.out)
    vocab.save(out)
    print(f"vocabulary: {len(vocab)} words")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "build-vocab",
                    {"min_count": args.min_count, "words": args.words},
                    inputs, [out], started)


def cmd_train(args) -> None:
    _run_training(args, "train", None, _train_config(args, distill=False))


def cmd_distill(args) -> None:
    config = _train_config(args, distill=True)
    _require_files(args.posteriors)
    store = PosteriorStore.load(args.posteriors)
    if config.alpha > 0 and store.num_senses != config.senses:
        raise TeacherFileError(
            f"posterior store has K={store.num_senses}, training uses K={config.senses}"
        )
    _run_training(args, "distill", store, config)


def cmd_fit_teacher(args) -> None:
    started = time.time()
    inputs = _require_files(args.records, args.vocab)
    vocab = Vocabulary.load(args.vocab)
    store = load_records(args.records, expected_digest=vocab.digest())
    seed = args.seed if args.seed is not None else _default_seed()
    tparams, stats = fit_teacher(
        store, len(vocab), args.senses, epochs=args.epochs, lr=args.lr, seed=seed
    )
    for s in stats:
        print(f"{s.epoch}\t{s.mean_loss:.6f}")
    out_params = Path(args.out_params)
    np.savez(out_params, sense=tparams.sense_emb, disamb=tparams.disamb_emb)
    posteriors = export_posteriors(store, tparams, temperature=args.temperature)
    out_post = Path(args.out_posteriors)
    posteriors.save(out_post)
    print(f"posteriors: {len(posteriors)} entries")
    _write_manifest(
        out_post.with_name(out_post.name + ".manifest.json"), "fit-teacher",
        {"senses": args.senses, "epochs": args.epochs, "lr": args.lr,
         "seed": seed, "temperature": args.temperature},
        inputs, [out_params, out_post], started)


def cmd_eval(args) -> None:
    started = time.time()
    inputs = _require_files(args.model, args.vocab, args.data)
    vocab = Vocabulary.load(args.vocab)
    params = load_model(args.model, vocab)
    delta = None if args.full_context else args.window
    reports = []
    if args.task == "wsi":
        grouped, skipped = load_wsi(args.data, vocab)
        result = eval_wsi(grouped, params, vocab, args.window, args.iter_context,
                          skipped_instances=skipped)
        for word in sorted(result.per_word):
            print(f"{word}\t{result.per_word[word]:.6f}")
        print(f"MEAN\t{result.mean:.6f}")
        reports.append({"dataset": args.data, "metric": "ari_mean",
                        "value": result.mean, "skipped": result.skipped_instances})
    else:
        pairs = load_scws(args.data)
        metrics = ["avgsimc", "maxsimc"] if args.metric == "both" else [args.metric]
        for metric in metrics:
            result = eval_scws(pairs, params, vocab, metric, delta, args.iter_context)
            print(f"{metric}\tspearman\t{result.rho:.6f}\tpairs\t{result.pairs_scored}")
            reports.append({"dataset": args.data, "metric": f"{metric}_spearman",
                            "value": result.rho, "skipped": result.skipped})
    json_path = Path(args.json) if args.json else None
    if json_path:
        json_path.write_text(json.dumps(reports, indent=2) + "\n", encoding="utf-8")
    manifest = (json_path.with_name(json_path.name + ".manifest.json")
                if json_path else Path("sensekit-eval.manifest.json"))
    _write_manifest(manifest, "eval",
                    {"task": args.task, "metric": args.metric, "window": args.window,
                     "full_context": args.full_context, "iter_context": args.iter_context},
                    inputs, [json_path] if json_path else [], started)


def cmd_nn(args) -> None:
    started = time.time()
    inputs = _require_files(args.model, args.vocab)
    vocab = Vocabulary.load(args.vocab)
    params = load_model(args.model, vocab)
    from .corpus import tokenize

    tokens = tokenize(args.context)
    word = args.word.lower()
    if word not in tokens:
        tokens = [word] + tokens  # allow giving the surrounding words only
    k, prob, ranked = nearest_neighbors(
        word, tokens, params, vocab, args.top, args.window, args.iter_context
    )
    print(f"# word={word}\tsense={k}\tprob={prob:.4f}")
    print("rank\tword\tcosine")
    for rank, (w, cos) in enumerate(ranked, 1):
        print(f"{rank}\t{w}\t{cos:.6f}")
    _write_manifest(Path("sensekit-nn.manifest.json"), "nn",
                    {"word": word, "top": args.top, "window": args.window},
                    inputs, [], started)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sensekit",
        description="Train and evaluate multi-sense word embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="tally a corpus into a vocabulary file")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--min-count", type=int, default=1,
                   help="drop words with fewer occurrences (default 1)")
    g.add_argument("--words", help="fixed word list file (one word per line)")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train sense embeddings")
    _add_train_flags(p)
    p.add_argument("--text-out", help="also export a text model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train with teacher-posterior distillation")
    _add_train_flags(p)
    p.add_argument("--text-out", help="also export a text model file")
    p.add_argument("--posteriors", required=True, help="teacher posterior store (TPO1)")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="transfer loss weight (default 1)")
    p.add_argument("--temperature", type=float, default=4.0,
                   help="distillation temperature (default 4)")
    p.add_argument("--kd-direction", choices=KD_DIRECTIONS, default=KD_PAPER)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("fit-teacher", help="fit the teacher sense decomposition")
    p.add_argument("--records", required=True, help="teacher record file (TSE1)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--senses", type=int, default=3)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--temperature", type=float, default=4.0,
                   help="softening of the exported posteriors (default 4)")
    p.add_argument("--out-params", required=True, help="teacher parameter file (.npz)")
    p.add_argument("--out-posteriors", required=True, help="posterior store (TPO1)")
    p.set_defaults(func=cmd_fit_teacher)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("wsi", "scws"), required=True)
    p.add_argument("--metric", choices=("avgsimc", "maxsimc", "both"), default="both")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--full-context", action="store_true",
                   help="use the whole context instead of a +-window")
    p.add_argument("--iter-context", choices=ITER_MODES, default=ITER_SHARED)
    p.add_argument("--json", help="write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("nn", help="nearest neighbors of a word in context")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--word", required=True)
    p.add_argument("--context", required=True, help="context text around the word")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--iter-context", choices=ITER_MODES, default=ITER_SHARED)
    p.set_defaults(func=cmd_nn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (FileNotFoundError, ModelIOError, TeacherFileError, DistillDataError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        code = EXIT_NUMERIC if "non-finite" in str(e) else EXIT_DATA
        print(f"error: {e}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
