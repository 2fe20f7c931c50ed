"""Command-line entry point: extraction, sweeps, exports and KNN scoring."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import pnm
from .bench import SweepSpec, records_to_csv, run_sweep
from .cost import max_resolution_under_budget, predict, reports_to_csv
from .errors import CheckpointError
from .evaluation import DEFAULT_K, FeatureSet, knn_predict, metrics
from .layout import TokenLayout
from .model import Checkpoint, ModelConfig
from .pruning import prune_map
from .sparse import DEFAULT_EXPORT_CAP, build_sparsity_pattern, export_mask
from .vit import Mode, Model, grid_for

THREADS_ENV = "SPARSEVIT_THREADS"


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _grid(text: str) -> tuple[int, int]:
    rows, _, cols = text.lower().partition("x")
    return int(rows), int(cols or rows)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="model config (key=value text); defaults built in")
    parser.add_argument("--checkpoint", type=Path, help="VITCKPT1 weights; random init from --seed if omitted")
    parser.add_argument("--mode", choices=("vanilla", "sparse", "sparse-prune"), default="vanilla")
    parser.add_argument("--window", type=int, default=8)
    parser.add_argument("--prune-ratio", type=float, default=0.6)
    parser.add_argument("--prune-layer", type=int, default=4)
    parser.add_argument("--aggregation", choices=("cls", "globals"), default="cls")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsevit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="CLS features for a list of PPM images")
    _common(p)
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--labels", type=_ints, help="comma-separated class per image (default 0)")
    p.add_argument("--mean", type=_floats, default=[0.5, 0.5, 0.5])
    p.add_argument("--std", type=_floats, default=[0.5, 0.5, 0.5])

    p = sub.add_parser("bench", help="resolution / window / ratio sweep to CSV")
    _common(p)
    p.add_argument("--resolutions", type=_ints, default=[224, 448, 896])
    p.add_argument("--modes", default="vanilla,sparse,sparse-prune")
    p.add_argument("--windows", type=_ints, default=[2, 8, 16, 64])
    p.add_argument("--ratios", type=_floats, default=[0.4, 0.5, 0.6, 0.7, 0.8])
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--budget-bytes", type=int, help="rows predicted to exceed this are marked oom")

    p = sub.add_parser("export-mask", help="allowed-pair mask as a PGM")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", type=_grid, help="patch grid, e.g. 16x16")
    g.add_argument("--resolution", type=int, help="square input size in pixels")
    p.add_argument("--cap", type=int, default=DEFAULT_EXPORT_CAP)

    p = sub.add_parser("export-prunemap", help="pruned patches of one image as CSV + PGM overlay")
    _common(p)
    p.add_argument("image", type=Path)
    p.add_argument("--overlay", type=Path, help="overlay PGM (default: --out with .pgm suffix)")
    p.add_argument("--mean", type=_floats, default=[0.5, 0.5, 0.5])
    p.add_argument("--std", type=_floats, default=[0.5, 0.5, 0.5])

    p = sub.add_parser("knn", help="KNN accuracy of test features against train features")
    _common(p)
    p.add_argument("train", type=Path)
    p.add_argument("test", type=Path)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--num-classes", type=int)

    p = sub.add_parser("cost", help="analytic cost report, or max resolution for a budget")
    _common(p)
    p.add_argument("--resolutions", type=_ints, default=[224])
    p.add_argument("--budget-bytes", type=int)
    p.add_argument("--csv", action="store_true")

    p = sub.add_parser("init", help="write a config and a random checkpoint")
    _common(p)
    p.add_argument("--config-out", type=Path)
    return ap


def _config(args) -> ModelConfig:
    return ModelConfig.load(args.config) if args.config else ModelConfig()


def _model(args) -> Model:
    cfg = _config(args)
    if args.checkpoint:
        return Model(cfg, Checkpoint.load(args.checkpoint))
    return Model.random(cfg, args.seed)


def _mode(args) -> Mode:
    if args.mode == "vanilla":
        return Mode.vanilla()
    if args.mode == "sparse":
        return Mode.sparse(args.window)
    return Mode.sparse_prune(args.window, args.prune_ratio, args.prune_layer, args.aggregation)


def _emit(args, text: str) -> None:
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)


def cmd_extract(args) -> int:
    if args.out is None:
        raise ValueError("extract needs --out")
    model, mode = _model(args), _mode(args)
    labels = args.labels or [0] * len(args.images)
    if len(labels) != len(args.images):
        raise ValueError(f"{len(labels)} labels for {len(args.images)} images")
    rows = []
    for path in args.images:
        image = pnm.normalize(pnm.read(path), args.mean, args.std)
        if image.ndim != 3:
            raise ValueError(f"{path} is not an RGB (P6) image")
        rows.append(model.forward(image, mode).cls_embedding)
    feats = FeatureSet(np.stack(rows), np.asarray(labels), [str(p) for p in args.images])
    feats.save(args.out)
    # re-read so a zero exit means the file is valid
    if FeatureSet.load(args.out).features.tobytes() != feats.features.tobytes():
        raise IOError(f"feature file {args.out} did not round-trip")
    return 0


def cmd_bench(args) -> int:
    model = _model(args)
    spec = SweepSpec(
        resolutions=args.resolutions,
        modes=[m for m in args.modes.split(",") if m],
        windows=args.windows,
        ratios=args.ratios,
        prune_layer=args.prune_layer,
        repetitions=args.repetitions,
        seed=args.seed,
    )
    _emit(args, records_to_csv(run_sweep(model, spec, args.budget_bytes)))
    return 0


def cmd_export_mask(args) -> int:
    cfg = _config(args)
    if args.grid:
        rows, cols = args.grid
    else:
        rows, cols = grid_for(args.resolution, args.resolution, cfg.patch_size)
    layout = TokenLayout(rows, cols, cfg.num_global_tokens)
    mask = export_mask(build_sparsity_pattern(layout, args.window), args.cap)
    if args.out is None:
        raise ValueError("export-mask needs --out")
    pnm.write(args.out, mask.to_pgm_pixels())
    print(f"{layout.total}x{layout.total} mask, {mask.popcount} allowed pairs -> {args.out}")
    return 0


def cmd_export_prunemap(args) -> int:
    # a prune map only exists for the pruning mode
    args.mode = "sparse-prune"
    model = _model(args)
    image = pnm.normalize(pnm.read(args.image), args.mean, args.std)
    out = model.forward(image, _mode(args))
    pm = prune_map(out.surviving_token_indices, out.layout, model.cfg.patch_size)
    if args.out is None:
        raise ValueError("export-prunemap needs --out")
    args.out.write_text(pm.to_csv())
    overlay = args.overlay or args.out.with_suffix(".pgm")
    pnm.write(overlay, pm.to_overlay())
    print(f"{pm.pruned_count} of {pm.grid_rows * pm.grid_cols} patches pruned -> {args.out}, {overlay}")
    return 0


def cmd_knn(args) -> int:
    train, test = FeatureSet.load(args.train), FeatureSet.load(args.test)
    if train.dim != test.dim:
        raise ValueError(f"train dim {train.dim} != test dim {test.dim}")
    pred = knn_predict(train, test.features, args.k)
    num_classes = args.num_classes
    if num_classes is None:
        num_classes = int(max(train.labels.max(), test.labels.max(), pred.max())) + 1
    report = {"k": args.k, "queries": len(test), **metrics(pred, test.labels, num_classes)}
    _emit(args, json.dumps(report, indent=2) + "\n")
    return 0


def cmd_cost(args) -> int:
    cfg, mode = _config(args), _mode(args)
    if args.budget_bytes is not None:
        res = max_resolution_under_budget(cfg, mode, args.budget_bytes)
        _emit(args, f"{mode.name}: max resolution {res}x{res} under {args.budget_bytes} bytes\n")
        return 0
    reports = [predict(cfg, r, mode) for r in args.resolutions]
    _emit(args, reports_to_csv(reports) if args.csv else "".join(r.to_text() for r in reports))
    return 0


def cmd_init(args) -> int:
    cfg = _config(args)
    if args.out is None:
        raise ValueError("init needs --out for the checkpoint")
    Checkpoint.random(cfg, args.seed).save(args.out)
    if args.config_out:
        cfg.save(args.config_out)
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "bench": cmd_bench,
    "export-mask": cmd_export_mask,
    "export-prunemap": cmd_export_prunemap,
    "knn": cmd_knn,
    "cost": cmd_cost,
    "init": cmd_init,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    threads = int(os.environ.get(THREADS_ENV, "1"))
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except (ValueError, OSError, CheckpointError, RuntimeError, FloatingPointError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
