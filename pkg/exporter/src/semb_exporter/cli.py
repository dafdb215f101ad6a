"""Command-line interface: semb-export export --metadata ... --out ..."""

import argparse
import logging
import sys

from .export import ExportError, ExportJob, run_export


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semb-export",
        description="Export item metadata to a SEMB v1 embedding file",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run or resume an export job")
    p.add_argument("--metadata", required=True, help="item metadata JSONL")
    p.add_argument("--model", required=True,
                   help="'stub:<dim>' or '<module>:<factory>' backend id")
    p.add_argument("--batch", type=int, default=32, help="items per backend call")
    p.add_argument("--out", required=True, help="output SEMB path")
    p.add_argument("--resume", action="store_true",
                   help="continue from the cursor sidecar of an interrupted run")
    p.add_argument("--normalize", action="store_true",
                   help="L2-normalize embeddings before writing (off by default)")
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    job = ExportJob(
        metadata_path=args.metadata,
        model=args.model,
        out_path=args.out,
        batch_size=args.batch,
        normalize=args.normalize,
        resume=args.resume,
    )
    try:
        result = run_export(job)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{result.status}: {result.items_done}/{result.items_total} items -> {result.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
