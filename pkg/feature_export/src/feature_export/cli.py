import argparse
import sys

from .exporter import export_features
from .writer import FeatureWriteError


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="feature-export",
        description="Export pretrained-encoder hidden states to a feature file")
    sub = p.add_subparsers(dest="command", required=True)
    e = sub.add_parser("export")
    e.add_argument("--model", required=True, help="hub id or local encoder path")
    e.add_argument("--prompts", required=True, help="one prompt per line, UTF-8")
    e.add_argument("--out", required=True)
    e.add_argument("--max-tokens", type=int, default=128)
    args = p.parse_args(argv)
    try:
        n = export_features(args.model, args.prompts, args.out, args.max_tokens)
    except FeatureWriteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {n} records to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
