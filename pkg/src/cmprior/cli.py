"""``cmprior`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys

import numpy as np

from . import prior_store
from .config import load_config
from .errors import ConfigError, FormatError, PriorError, TrainingError
from .grid_codec import build_levels, level_growth
from .harness.bench import bench_end_to_end, bench_prior_sampling
from .harness.metrics import miou
from .harness.raster import load_raster, save_raster
from .harness.recon import predict_raster, train_reconstruction
from .harness.synth import CLASS_NAMES, synth_map
from .harness.traversal import read_samples, traversal_histogram
from .quantize import layout_memory, memory_report

log = logging.getLogger("cmprior")

EXIT_CONFIG, EXIT_FILE, EXIT_DIVERGED, EXIT_OTHER = 2, 3, 4, 1


def _class_name(k: int) -> str:
    return CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}"


def _resolved_config(args):
    cfg = load_config(args.config, args.set or ())
    log.info("resolved config:\n%s", cfg.dump())
    return cfg


def cmd_synth(args):
    raster = synth_map(args.seed, area_m=args.area_m, meters_per_cell=args.meters_per_cell)
    save_raster(raster, args.out)
    fractions = ", ".join(f"{_class_name(k)}={f:.4f}" for k, f in enumerate(raster.class_fractions()))
    print(f"wrote {args.out}: {raster.width}x{raster.height} cells, {fractions}")


def cmd_train(args):
    cfg = _resolved_config(args)
    raster = load_raster(args.map)
    result = train_reconstruction(raster, cfg.to_reconstruction())
    store = prior_store.freeze(result.model, head=result.probe)
    prior_store.save(store, args.out)
    report = memory_report(result.model.grid, binarized=True)
    metrics_path = args.metrics or str(args.out).rsplit(".", 1)[0] + ".metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table_size", "binarized", "seed", "miou",
                    *[f"iou_{_class_name(k)}" for k in range(raster.classes)],
                    "size_kb", "kb_per_km2", "final_loss"])
        w.writerow([cfg.table_size, int(cfg.binarized), cfg.seed, f"{result.miou:.6f}",
                    *[f"{x:.6f}" for x in result.ious], f"{report.total_kb:.3f}",
                    f"{report.kb_per_km2:.3f}", f"{result.epoch_losses[-1]:.6f}"])
    print(f"mIoU {result.miou:.4f}; wrote {args.out} and {metrics_path}")


def cmd_eval(args):
    store = prior_store.load(args.prior)
    raster = load_raster(args.map)
    if store.head is None:
        raise FormatError("prior file has no segmentation head")
    pred = predict_raster(store, store.head, raster)
    ious, mean = miou(pred, raster.data, raster.classes)
    w = csv.writer(sys.stdout)
    w.writerow(["class", "iou"])
    for k, v in enumerate(ious):
        w.writerow([_class_name(k), "nan" if np.isnan(v) else f"{v:.6f}"])
    w.writerow(["mean", f"{mean:.6f}"])


def cmd_query(args):
    store = prior_store.load(args.prior)
    feats = prior_store.prior_features(store, np.array([[args.x, args.y]]), policy=args.policy)
    print(" ".join(f"{v:.7g}" for v in feats[0]))


def cmd_memtable(args):
    cfg = _resolved_config(args)
    side = math.sqrt(args.area * 1e6)
    coverage = (0.0, 0.0, side, side)
    growth = level_growth(cfg.levels, cfg.s_min, cfg.s_max)
    w = csv.writer(sys.stdout)
    w.writerow(["T", "size_kb", "kb_per_km2", "full_precision_kb_per_km2"])
    for exp in args.log2_table_sizes:
        levels = build_levels(cfg.levels, 2**exp, coverage, cfg.s_min, growth)
        binary = layout_memory(levels, cfg.feature_dim, coverage, True)
        full = layout_memory(levels, cfg.feature_dim, coverage, False)
        w.writerow([f"2^{exp}", f"{binary.total_kb:.1f}", f"{binary.kb_per_km2:.1f}", f"{full.kb_per_km2:.1f}"])


def cmd_bench(args):
    store = prior_store.load(args.prior)
    sampling = bench_prior_sampling(store, grid=args.grid, runs=args.runs)
    print(f"prior sampling {args.grid}x{args.grid}: {sampling.mean_ms:.2f} +- {sampling.std_ms:.2f} ms "
          f"over {sampling.runs} runs")
    if args.end_to_end:
        total, part = bench_end_to_end(store, grid=args.grid, runs=args.e2e_runs)
        print(f"toy end-to-end forward: {total.mean_ms:.2f} +- {total.std_ms:.2f} ms; "
              f"prior sampling share {100 * part.mean_ms / total.mean_ms:.2f}%")


def cmd_traversals(args):
    samples, splits = read_samples(args.log)
    train, query, hist = traversal_histogram(samples, splits, args.query_split, args.radius)
    log.info("%d training scenes after merging, %d query scenes", len(train), len(query))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["traversal_count", "samples"])
        for count, n in hist.items():
            w.writerow([count, n])
    finally:
        if args.out:
            out.close()
    if args.merged_out:
        with open(args.merged_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["merged_scene", "members", "samples"])
            for s in train:
                w.writerow([s.scene_id, ";".join(s.members), len(s.samples)])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmprior", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("synth", help="generate a synthetic semantic map")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--area-m", type=float, default=1000.0)
    sp.add_argument("--meters-per-cell", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a prior on a map and freeze it")
    sp.add_argument("--map", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics", help="metrics CSV path (default: next to --out)")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="mIoU of a frozen prior on a map")
    sp.add_argument("--prior", required=True)
    sp.add_argument("--map", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("query", help="print the prior feature at a world point")
    sp.add_argument("--prior", required=True)
    sp.add_argument("--x", type=float, required=True)
    sp.add_argument("--y", type=float, required=True)
    sp.add_argument("--policy", choices=prior_store.OUT_OF_COVERAGE_POLICIES, default="zero")
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("memtable", help="embedding size table for a coverage area")
    sp.add_argument("--area", type=float, default=6.4, help="coverage area in km^2")
    sp.add_argument("--log2-table-sizes", type=int, nargs="+", default=[15, 16, 17, 18])
    with_config(sp)
    sp.set_defaults(func=cmd_memtable)

    sp = sub.add_parser("bench", help="prior sampling latency")
    sp.add_argument("--prior", required=True)
    sp.add_argument("--grid", type=int, default=128)
    sp.add_argument("--runs", type=int, default=100)
    sp.add_argument("--end-to-end", action="store_true", help="also time a toy BEV forward pass")
    sp.add_argument("--e2e-runs", type=int, default=10)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("traversals", help="traversal-count histogram from a trajectory log")
    sp.add_argument("--log", required=True, help="CSV with scene_id,timestamp,x,y[,split]")
    sp.add_argument("--query-split", default="val")
    sp.add_argument("--radius", type=float, default=50.0)
    sp.add_argument("--out", help="histogram CSV (default: stdout)")
    sp.add_argument("--merged-out", help="write merged training scenes here")
    sp.set_defaults(func=cmd_traversals)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )
    if args.command in ("train", "memtable"):
        # the resolved config is always logged
        logging.getLogger("cmprior").setLevel(logging.INFO)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"cmprior: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"cmprior: file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except TrainingError as exc:
        print(f"cmprior: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PriorError as exc:
        print(f"cmprior: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return 0


if __name__ == "__main__":
    sys.exit(main())
