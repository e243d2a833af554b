"""Command line: train, evaluate, predict, score-words.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import load_corpus
from .embeddings import load_embeddings
from .evaluation import MODELS, cross_validate, fit_predict, metrics_csv, score
from .supervision import compute_ranks
from .textprep import build_vocab
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("hlstm_phish")


class UsageError(Exception):
    pass


def _add_corpus(p, required=True):
    p.add_argument("--corpus", required=required, help="csv file or directory with legit/ and phish/")
    p.add_argument("--layout", default="auto", choices=["auto", "csv", "two-dirs", "flat"])


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--embeddings", help="word vectors, '<count> <dim>' text format")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.max_epochs)
    p.add_argument("--patience", type=int, default=d.patience, help="0 disables early stopping")
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--clip", type=float, default=d.clip)
    p.add_argument("--clip-target", choices=["grad", "weight"], default=d.clip_target)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--L", type=int, default=d.L)
    p.add_argument("--K", type=int, default=d.K)
    p.add_argument("--H", type=int, default=d.H)
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--cell", type=int, default=d.cell)
    p.add_argument("--att", type=int, default=d.att)
    p.add_argument("--min-count", type=int, default=d.min_count)
    p.add_argument("--use-header", action="store_true")


def _config_from(args, supervised=True) -> TrainConfig:
    try:
        return TrainConfig(
            lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
            patience=args.patience or None, lam=args.lam, dropout=args.dropout, clip=args.clip,
            clip_target=args.clip_target, seed=args.seed, L=args.L, K=args.K, H=args.H,
            embed_dim=args.embed_dim, cell=args.cell, att=args.att, use_header=args.use_header,
            use_supervision=supervised, min_count=args.min_count,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hlstm-phish", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an H-LSTM and write a checkpoint")
    _add_corpus(p)
    _add_train_flags(p)
    p.add_argument("--model", choices=["hlstm", "hlstm-supervised"], default="hlstm-supervised")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="cross-validation or train/test evaluation")
    p.add_argument("--corpus", "--train-set", dest="corpus", required=True)
    p.add_argument("--layout", default="auto", choices=["auto", "csv", "two-dirs", "flat"])
    p.add_argument("--test-corpus", "--test-set", dest="test_corpus")
    _add_train_flags(p)
    p.add_argument("--model", default="hlstm-supervised", help=f"one of {', '.join(MODELS)}")
    p.add_argument("--cv", type=int, default=5)
    p.add_argument("--svm-c", type=float, default=10.0)
    p.add_argument("--pooled", action="store_true", help="also report metrics pooled over folds")
    p.add_argument("--out", help="output directory (metrics.csv); stdout when omitted")

    p = sub.add_parser("predict", help="phishing probabilities for a corpus")
    _add_corpus(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--use-header", action="store_true", help="require a header model")
    p.add_argument("--out", help="TSV path; stdout when omitted")

    p = sub.add_parser("score-words", help="rank-based importance score table")
    _add_corpus(p)
    p.add_argument("--min-count", type=int, default=TrainConfig().min_count)
    p.add_argument("--top", type=int)
    p.add_argument("--out", help="TSV path; stdout when omitted")
    return parser


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    config = _config_from(args, supervised=args.model == "hlstm-supervised")
    dataset = load_corpus(args.corpus, args.layout)
    vectors = load_embeddings(args.embeddings) if args.embeddings else None
    ckpt = train(dataset, config, embeddings=vectors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "model.ckpt")
    _emit(ckpt.history.to_csv(), out / "history.csv")
    _emit(json.dumps(ckpt.config.to_dict(), indent=2, sort_keys=True) + "\n", out / "config.json")
    ckpt.vocab.save(out / "vocab.txt")
    logger.info("wrote %s", out)
    return 0


def cmd_evaluate(args) -> int:
    if args.model not in MODELS:
        raise UsageError(f"unknown model {args.model!r}; choose from {', '.join(MODELS)}")
    if args.test_corpus is None and args.cv < 2:
        raise UsageError("--cv must be at least 2")
    config = _config_from(args)
    dataset = load_corpus(args.corpus, args.layout)
    vectors = load_embeddings(args.embeddings) if args.embeddings else None
    if args.test_corpus is not None:
        test = load_corpus(args.test_corpus, "auto")
        preds = fit_predict(args.model, dataset, test, config, vectors, args.svm_c)
        rows = [(args.model, "test", score(preds, test.labels))]
    else:
        result = cross_validate(dataset, config, args.cv, args.seed, args.model, vectors, args.svm_c)
        rows = [(args.model, f, m) for f, m in enumerate(result.folds)]
        rows.append((args.model, "mean", result.mean))
        if args.pooled:
            rows.append((args.model, "pooled", result.pooled))
    text = metrics_csv(rows)
    _emit(text, Path(args.out) / "metrics.csv" if args.out else None)
    if args.out:
        _emit(json.dumps({**config.to_dict(), "model": args.model, "cv": args.cv}, indent=2, sort_keys=True) + "\n",
              Path(args.out) / "config.json")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, use_header=True if args.use_header else None)
    dataset = load_corpus(args.corpus, args.layout, allow_empty=True)
    if ckpt.use_header and len(dataset) and not dataset.has_headers:
        raise RuntimeError("checkpoint was trained with headers but the corpus has no headers")
    probs = ckpt.predict_proba(dataset)
    lines = ["id\tprobability\tlabel"]
    for email, p in zip(dataset.emails, probs):
        lines.append(f"{email.id}\t{p:.6f}\t{int(p >= 0.5)}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_score_words(args) -> int:
    dataset = load_corpus(args.corpus, args.layout)
    table = compute_ranks(dataset, build_vocab(dataset, args.min_count))
    _emit(table.to_tsv(args.top), args.out)
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict, "score-words": cmd_score_words}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as exit code 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
