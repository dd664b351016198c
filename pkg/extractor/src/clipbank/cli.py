"""CLI: encode an image folder into a TOGB bank.

Usage: clipbank extract --data DIR --out bank.togb [--model vit-b-16]
                        [--template "a photo of a {cls}."]
"""

import argparse
import sys

from .extract import ExtractionJob, extract


def build_parser():
    parser = argparse.ArgumentParser(
        prog="clipbank",
        description="Encode class-per-folder image datasets into TOGB banks "
                    "with a frozen pretrained backbone.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="crop 18 multi-scale views per image, "
                                       "encode, and write the bank")
    p.add_argument("--data", required=True, help="dataset root (one folder per class)")
    p.add_argument("--out", required=True, help="output .togb path")
    p.add_argument("--model", default="vit-b-16",
                   help="vit-b-16 / vit-b-32 / vit-l-14, a HuggingFace CLIP "
                        "name, or stub-<dim> for the deterministic test encoder")
    p.add_argument("--template", default="a photo of a {cls}.")
    p.add_argument("--device", default="cpu")
    p.add_argument("--query-fraction", dest="query_fraction", type=float,
                   default=0.5, help="fraction of each class tagged as query")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    job = ExtractionJob(data_dir=args.data, out_path=args.out, model=args.model,
                        template=args.template, device=args.device,
                        query_fraction=args.query_fraction)
    try:
        path, count = extract(job)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}: {count} images"
          + (f", skipped {len(job.skipped)}" if job.skipped else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
