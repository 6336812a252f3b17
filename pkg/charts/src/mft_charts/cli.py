"""Thin command-line wrapper: CSV in, one image out. Exit 1 on bad input."""

from __future__ import annotations

import argparse
import sys

from .render import ChartError, ChartSpec, render_comparison


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mft-charts", description="render per-AU F1 bar charts from a metrics CSV")
    parser.add_argument("--csv", required=True, help="metrics report CSV")
    parser.add_argument("--out", required=True, help="output image path (.svg preferred)")
    parser.add_argument("--variants", default="", help="comma-separated variant filter; empty plots all")
    parser.add_argument("--title", default="Per-AU F1 comparison")
    args = parser.parse_args(argv)
    variants = tuple(part.strip() for part in args.variants.split(",") if part.strip())
    spec = ChartSpec(csv_path=args.csv, output_path=args.out, variants=variants, title=args.title)
    try:
        render_comparison(spec)
    except (ChartError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
