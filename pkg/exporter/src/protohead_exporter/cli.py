"""Command-line entry point: export-features over a directory of images."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from protohead.errors import ProtoheadError

from .backbones import available_backbones
from .export import ExportJob, export_features, export_instance_list

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def _collect_images(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protohead-export",
        description="export per-patch ViT features (PHF1) and instance lists",
    )
    parser.add_argument("--images", required=True, help="image file or directory")
    parser.add_argument("--backbone", default="seeded-vit-s-14",
                        help=f"one of: {', '.join(available_backbones())}")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--annotations", help="JSON annotation file (boxes/masks per image)")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        images = _collect_images(Path(args.images))
        if not images:
            print(f"error: no images found under {args.images}", file=sys.stderr)
            return 1
        job = ExportJob(
            tuple(images), args.backbone, Path(args.out),
            annotations=Path(args.annotations) if args.annotations else None,
            seed=args.seed,
        )
        written = export_features(job)
        print(f"wrote {len(written)} feature maps -> {args.out}")
        if args.annotations:
            instances = export_instance_list(job)
            print(f"wrote instance list -> {instances}")
        return 0
    except (ProtoheadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
