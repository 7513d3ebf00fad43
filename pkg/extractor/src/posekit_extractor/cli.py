"""CLI: extract a directory of images into a posekit scene manifest."""

import argparse
import json
import sys

from . import ExtractorError
from .config import load_config
from .pipeline import run_extraction


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="posekit-extract", description=__doc__)
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--out", required=True, help="output manifest directory")
    parser.add_argument("--config", default=None, help="YAML config (optional)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        manifest = run_extraction(args.images, args.out, cfg)
    except (ExtractorError, ValueError, OSError) as exc:
        print(f"posekit-extract: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"manifest_path": manifest}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
