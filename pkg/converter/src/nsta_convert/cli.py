"""Command-line entry point: one checkpoint in, one NSTA archive out."""

from __future__ import annotations

import argparse
import json
import sys

from .convert import FLAVORS, ConvertError, convert_checkpoint, load_name_map


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nsta-convert",
        description="Convert a ViT checkpoint (PyTorch state dict) to an NSTA archive.",
    )
    parser.add_argument("checkpoint", help="path to the source checkpoint (.pth)")
    parser.add_argument("out", help="path of the archive to write")
    parser.add_argument(
        "--flavor",
        default="vit_large",
        help=f"bundled name map ({', '.join(FLAVORS)}) or a path to a custom "
        "name-map JSON file",
    )
    args = parser.parse_args(argv)
    try:
        name_map = load_name_map(args.flavor)
        report = convert_checkpoint(args.checkpoint, name_map, args.out)
    except ConvertError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2
    print(f"wrote {report['archive']} ({len(report['tensors'])} tensors)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
