"""Command line: export logits for masked instances, or lint a logits file."""

from __future__ import annotations

import argparse
import sys

from .core import ExportJob, SchemaError, export_logits, validate


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlm-exporter",
        description="Fill masked trigger slots with top-k model candidates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="write a logits file for masked instances")
    p.add_argument("--input", required=True, help="masked-instances JSONL")
    p.add_argument("--output", required=True, help="logits JSONL to write")
    p.add_argument("--model", default="hash",
                   help="'hash' (offline deterministic) or a masked-LM model name")
    p.add_argument("--top-n", type=int, default=10)

    p = sub.add_parser("validate", help="lint a logits file")
    p.add_argument("file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "export":
        job = ExportJob(args.input, args.model, args.top_n, args.output)
        try:
            count = export_logits(job)
        except (SchemaError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"wrote {count} records to {args.output}")
        return 0

    report = validate(args.file)
    print(
        f"{report.records} records, {report.parse_errors} parse errors, "
        f"{report.sort_violations} sort violations, "
        f"{report.duplicate_surfaces} duplicate-surface records"
    )
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
