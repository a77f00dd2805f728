"""Command line entry point for the VGG16 exporter."""

import argparse
import sys

from .export import ExportError, export_vgg16


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="vgg-export",
        description="Export pretrained VGG16 conv weights and fixture "
                    "activations to an STSCW file.")
    ap.add_argument("--out", required=True, help="output STSCW path")
    ap.add_argument("--fixture", required=True, help="fixture PPM image")
    ap.add_argument("--weights", default=None,
                    help="local .pth state dict (skips the model zoo fetch)")
    args = ap.parse_args(argv)
    try:
        export_vgg16(args.out, args.fixture, args.weights)
    except (ExportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
