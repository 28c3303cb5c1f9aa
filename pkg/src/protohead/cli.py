"""Command-line interface.

Subcommands:
    build-prototypes   instance-list file -> PHB1 prototype bank
    detect             feature map + proposals + bank -> detections file
    dump-heatmaps      write initial/propagated heatmaps as numeric grids
    inspect            print the header of a PHF1/PHB1/PHW1 file
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np

from .classifier_head import ClsNetWeights, preselect_classes
from .errors import FormatError, ProtoheadError
from .feature_io import (
    PHB_MAGIC,
    PHF_MAGIC,
    RegionFeatures,
    load_feature_map,
    load_prototype_bank,
    roi_align,
    save_prototype_bank,
)
from .localizer_head import (
    IntegralParams,
    LocNetWeights,
    _normalize_cells,
    load_loc_weights,
    region_propagation_maps,
)
from .network import PHW_MAGIC, read_weight_container
from .pipeline import PipelineConfig, detect, load_proposals, save_detections
from .prototype_builder import build_bank, load_instance_records


def _resolve_workers() -> int:
    # serial by default: per-proposal work is small numpy ops where thread
    # overhead usually dominates; PROTOHEAD_THREADS opts in and caps the pool
    cap = os.environ.get("PROTOHEAD_THREADS")
    if cap is None:
        return 1
    try:
        requested = int(cap)
    except ValueError:
        raise ProtoheadError(f"PROTOHEAD_THREADS must be an integer, got {cap!r}")
    return min(max(1, requested), os.cpu_count() or 1)


def _load_nets(args, background_count: int, grid: int):
    channels_cls = 1 + args.t + background_count
    if args.cls_weights:
        cls = ClsNetWeights.load(args.cls_weights)
    else:
        cls = ClsNetWeights.seeded(channels_cls, seed=args.seed)
        print(f"note: no --cls-weights given, using seeded init ({channels_cls} channels)",
              file=sys.stderr)
    if args.loc_weights:
        loc, params = load_loc_weights(args.loc_weights)
    else:
        loc = LocNetWeights.seeded(2 + background_count, seed=args.seed)
        params = IntegralParams.uniform(grid)
        print(f"note: no --loc-weights given, using seeded init ({2 + background_count} channels)",
              file=sys.stderr)
    return cls, loc, params


def _cmd_detect(args) -> int:
    fm = load_feature_map(args.features)
    proposals = load_proposals(args.proposals)
    bank = load_prototype_bank(args.bank)
    config = PipelineConfig(
        k=args.k,
        t=args.t,
        grid=args.grid,
        nms_iou=args.nms_iou,
        score_threshold=args.score_thr,
        min_box_area=args.min_area,
        normalize=not args.no_normalize,
        seed=args.seed,
        workers=_resolve_workers(),
        bank_path=args.bank,
        cls_weights_path=args.cls_weights,
        loc_weights_path=args.loc_weights,
    )
    cls, loc, params = _load_nets(args, bank.num_backgrounds, args.grid)
    stats: dict = {}
    dets = detect(fm, proposals, bank, config, cls, loc, params, stats=stats)
    save_detections(dets, args.out)
    print(
        f"scored {stats['candidates_scored']} candidates over {stats['proposals']} proposals; "
        f"kept {stats['kept']} detections -> {args.out}"
    )
    return 0


def _cmd_build_prototypes(args) -> int:
    records = load_instance_records(args.instances)
    background = tuple(s.strip() for s in (args.background or "").split(",") if s.strip())
    bank = build_bank(
        records,
        background_classes=background,
        mode=args.mode,
        centroids=args.centroids,
        beta=args.beta,
        steps=args.steps,
        epsilon=args.epsilon,
        iters=args.iters,
        seed=args.seed,
        normalize=not args.no_normalize,
        feature_root=Path(args.instances).parent,
    )
    save_prototype_bank(bank, args.out)
    print(f"wrote bank: C={bank.num_classes} B={bank.num_backgrounds} D={bank.dim} -> {args.out}")
    return 0


def _cmd_dump_heatmaps(args) -> int:
    fm = load_feature_map(args.features)
    proposals = load_proposals(args.proposals)[: args.limit]
    bank = load_prototype_bank(args.bank)
    if args.loc_weights:
        loc, _ = load_loc_weights(args.loc_weights)
    else:
        loc = LocNetWeights.seeded(2 + bank.num_backgrounds, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, proposal in enumerate(proposals):
        region = roi_align(fm, proposal, args.grid)
        if not args.no_normalize:
            region = RegionFeatures(_normalize_cells(region.data))
        top = preselect_classes(region, bank, 1)[0]
        _, initial, logits = region_propagation_maps(
            proposal, fm, bank, top, loc, args.grid, normalize=not args.no_normalize
        )
        np.savetxt(out_dir / f"proposal_{i:04d}_initial.txt", initial.data, fmt="%.0f")
        np.savetxt(out_dir / f"proposal_{i:04d}_logits.txt", logits.data, fmt="%.6f")
    print(f"wrote {2 * len(proposals)} heatmap grids -> {out_dir}")
    return 0


def _cmd_inspect(args) -> int:
    for path in args.files:
        with open(path, "rb") as fh:
            head = fh.read(28)
        magic = head[:4]
        if magic == PHF_MAGIC:
            if len(head) < 28:
                raise FormatError(f"{path}: truncated PHF1 header ({len(head)} bytes)")
            h, w, d, img_w, img_h, stride = struct.unpack_from("<6I", head, 4)
            print(f"{path}: PHF1 feature map H={h} W={w} D={d} "
                  f"image={img_w}x{img_h}px stride={stride}px")
        elif magic == PHB_MAGIC:
            bank = load_prototype_bank(path)
            print(f"{path}: PHB1 prototype bank C={bank.num_classes} B={bank.num_backgrounds} "
                  f"D={bank.dim} normalized={bank.normalized} classes={list(bank.class_names)}")
        elif magic == PHW_MAGIC:
            branch, blocks, in_ch, arrays = read_weight_container(path)
            kind = "classification" if branch == 0 else "localization"
            shapes = ", ".join(str(tuple(a.shape)) for a in arrays)
            print(f"{path}: PHW1 {kind} weights blocks={blocks} in_channels={in_ch} "
                  f"arrays=[{shapes}]")
        else:
            raise FormatError(f"{path}: unknown magic {magic!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protohead",
                                     description="prototype-based detection head toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run detection over a feature map")
    p.add_argument("--features", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--cls-weights")
    p.add_argument("--loc-weights")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--t", type=int, default=128)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--score-thr", type=float, default=0.05)
    p.add_argument("--min-area", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("build-prototypes", help="build a PHB1 bank from an instance list")
    p.add_argument("--instances", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--background", help="comma-separated background class names")
    p.add_argument("--mode", choices=("mean", "cluster"), default="mean")
    p.add_argument("--centroids", type=int, default=10)
    p.add_argument("--beta", type=float, default=0.002)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=_cmd_build_prototypes)

    p = sub.add_parser("dump-heatmaps", help="write per-proposal heatmaps as text grids")
    p.add_argument("--features", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--loc-weights")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=_cmd_dump_heatmaps)

    p = sub.add_parser("inspect", help="print headers of PHF1/PHB1/PHW1 files")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=_cmd_inspect)

    return parser


def run_cli(argv=None) -> int:
    """Dispatch one CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ProtoheadError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
