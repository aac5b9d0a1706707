"""Command-line interface: ``extract`` and ``validate``."""

from __future__ import annotations

import argparse
import sys

from .encoder import EncoderError
from .extract import extract
from .records import validate
from .windows import Vocab

EXIT_OK = 0
EXIT_DATA = 3


def cmd_extract(args) -> int:
    stats = extract(
        corpus_paths=args.corpus,
        vocab_path=args.vocab,
        encoder_spec=args.encoder,
        delta=args.window,
        out_path=args.out,
        batch_size=args.batch_size,
        max_length=args.max_length,
    )
    print(f"paragraphs\t{stats.paragraphs}")
    print(f"paragraphs_skipped_length\t{stats.paragraphs_skipped_length}")
    print(f"windows_written\t{stats.windows_written}")
    print(f"windows_skipped_alignment\t{stats.windows_skipped_alignment}")
    return EXIT_OK


def cmd_validate(args) -> int:
    vocab = Vocab.load(args.vocab)
    report = validate(args.file, vocab.digest(), len(vocab))
    print(f"records\t{report.records}")
    print(f"vectors\t{report.vectors}")
    print(f"dim\t{report.dim}")
    print(f"window\t{report.delta}")
    print(f"violations\t{len(report.violations)}")
    if not report.ok:
        print(f"first violation: {report.violations[0]}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teacher-extract",
        description="Pool contextual-encoder vectors into teacher record files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run the encoder over corpus windows")
    p.add_argument("--corpus", nargs="+", required=True, help="corpus text file(s)")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--encoder", required=True,
                   help="encoder spec, e.g. hf:bert-base-uncased or hf:/path")
    p.add_argument("--window", type=int, default=5, help="context radius (default 5)")
    p.add_argument("--out", required=True, help="output record file (TSE1)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-length", type=int, default=None,
                   help="override the encoder's sequence-length limit")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("validate", help="check a record file against a vocabulary")
    p.add_argument("--file", required=True, help="record file (TSE1)")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, EncoderError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
