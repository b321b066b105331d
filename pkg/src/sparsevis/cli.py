"""Command-line entry point: ``sparsevis <command> --config FILE``.

Exit codes: 0 when every requested cell finished, 2 when results are
partial, 1 on configuration or input errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .config import SweepConfig, load_config
from .dataset import stack
from .io import write_json

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2
log = logging.getLogger("sparsevis")


def _load(args) -> SweepConfig:
    cfg = load_config(args.config) if args.config else SweepConfig()
    changes = {}
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if args.deterministic:
        changes["deterministic"] = True
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _finish(result: harness.SweepResult) -> int:
    for e in result.errors:
        log.error(e)
    if result.rows:
        print(f"{len(result.rows)} rows written to {Path(result.output_dir) / 'report.csv'}")
    print("complete" if result.complete else f"partial: {len(result.errors)} cell(s) missing")
    return EXIT_OK if result.complete else EXIT_PARTIAL


def cmd_gen_data(cfg, args) -> int:
    train, test = harness.prepare_data(cfg, Path(cfg.output_dir))
    print(f"train {len(train)}, test {len(test)} images in {Path(cfg.output_dir) / 'data'}")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    from .models import build_model, save_checkpoint
    from .training import train

    harness.set_deterministic(cfg.deterministic, args.jobs)
    train_samples, _ = harness.prepare_data(cfg, Path(cfg.output_dir))
    model = build_model(cfg.model)
    result = train(model, stack(train_samples), cfg.schedule)
    path = save_checkpoint(model, Path(cfg.output_dir) / "dense" / "checkpoint",
                           {"config_hash": cfg.hash(), "losses": result.losses, "lrs": result.lrs})
    print(f"final loss {result.losses[-1]:.4f}; checkpoint {path}")
    return EXIT_OK


def cmd_prune_sweep(cfg, args) -> int:
    from .pruning import SweepStats

    harness.set_deterministic(cfg.deterministic, args.jobs)
    outdir = Path(cfg.output_dir)
    train_samples, _ = harness.prepare_data(cfg, outdir)
    stats = SweepStats()
    pool = harness.build_pool(cfg, outdir, train_samples, args.resume, stats)
    for e in pool.entries:
        print(f"entry {e.index:2d}  sparsity {e.sparsity:.4f}  final loss {e.losses[-1]:.4f}")
    print(f"training steps this run: {stats.train_steps}")
    return EXIT_OK if pool.entries[-1].sparsity >= cfg.pruning.T else EXIT_PARTIAL


def cmd_attribute(cfg, args) -> int:
    from .attribution import attribute_batch, render_png, save_saliency, SaliencyMap, targets_for
    from .pruning import Pool

    harness.set_deterministic(cfg.deterministic, args.jobs)
    outdir = Path(cfg.output_dir)
    _, test = harness.prepare_data(cfg, outdir)
    pool = Pool.load(outdir / "pool")
    model, _ = pool.load_model(args.entry)
    n = min(args.n_images, len(test))
    data = stack(test[:n])
    targets = targets_for(model, data["images"], data["labels"], cfg.attribution.target)
    dest = outdir / "saliency" / f"entry_{args.entry:02d}"
    for method in cfg.attribution.methods:
        maps, _ = attribute_batch(model, data["images"], method, targets, cfg.attribution)
        for i, m in enumerate(maps):
            smap = SaliencyMap(m, method, int(targets[i]), not m.any(), {})
            save_saliency(smap, dest / method / f"{i:04d}", {"entry": args.entry, "image": i})
            if args.png:
                render_png(smap, dest / method / f"{i:04d}.png", data["images"][i])
    print(f"maps for {n} images written to {dest}")
    return EXIT_OK


def _eval(task: str):
    def run(cfg, args) -> int:
        tasks = ("accuracy", task) if task != "accuracy" else ("accuracy",)
        cfg = dataclasses.replace(cfg, tasks=tasks)
        return _finish(harness.run_sweep(cfg, resume=True, jobs=args.jobs, build=False))
    return run


def cmd_report(cfg, args) -> int:
    return _finish(harness.collect_report(cfg))


def cmd_sweep(cfg, args) -> int:
    return _finish(harness.run_sweep(cfg, resume=args.resume, jobs=args.jobs))


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate and store the train/test splits"),
    "train": (cmd_train, "train the dense model only"),
    "prune-sweep": (cmd_prune_sweep, "build the pruned model pool"),
    "attribute": (cmd_attribute, "write saliency maps for one pool entry"),
    "eval-interp": (_eval("interp"), "RMA/RRA for every pool entry"),
    "eval-od": (_eval("od"), "LOST IoU and CorLoc for every pool entry"),
    "eval-ha": (_eval("ha"), "distortion accuracy for every pool entry"),
    "report": (cmd_report, "assemble the report from cached results"),
    "sweep": (cmd_sweep, "run everything end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsevis", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML or JSON sweep configuration")
        p.add_argument("--output-dir", help="override output_dir from the config")
        p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                       help="reuse persisted pool entries and cached cells (default on)")
        p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
        p.add_argument("--jobs", type=int, default=1, help="torch threads when not deterministic")
        if name == "attribute":
            p.add_argument("--entry", type=int, default=0)
            p.add_argument("--n-images", type=int, default=16)
            p.add_argument("--png", action="store_true", help="also render PNG previews")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        cfg = _load(args)
        write_json(Path(cfg.output_dir) / "config.json", cfg.to_dict())
        return COMMANDS[args.command][0](cfg, args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
