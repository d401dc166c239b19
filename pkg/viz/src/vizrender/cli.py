"""``partvit-render`` entry point.

Usage: partvit-render render {attention|landmarks|curves} --in DIR --out DIR
Exit codes: 0 ok, 1 runtime failure, 2 usage/validation error.
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from .bundle import DumpBundle, RenderError
from .render import render_attention, render_curves, render_landmarks


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partvit-render",
                                description="render face-transformer dumps")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("render")
    r.add_argument("what", choices=["attention", "landmarks", "curves"])
    r.add_argument("--in", dest="in_dir", required=True, help="bundle directory")
    r.add_argument("--out", dest="out_dir", required=True, help="output directory")
    r.add_argument("--images", help="image tree root (default: bundle dir)")
    r.add_argument("--layer", type=int, help="attention layer (default: last dumped)")
    r.add_argument("--heads", help="comma-separated head indices (default: all)")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        bundle = DumpBundle.from_dir(args.in_dir, image_dir=args.images)
        if args.what == "landmarks":
            paths = render_landmarks(bundle, args.out_dir)
            print("\n".join(paths))
        elif args.what == "attention":
            heads = None
            if args.heads:
                heads = [int(h) for h in args.heads.split(",")]
            print(render_attention(bundle, args.out_dir, layer=args.layer, heads=heads))
        else:
            print(render_curves(bundle, args.out_dir)["path"])
        return 0
    except RenderError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
