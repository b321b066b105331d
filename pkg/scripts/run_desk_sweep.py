#!/usr/bin/env python3
"""Run the desk-scale sweep and print a short summary.

    python scripts/run_desk_sweep.py [--config scripts/configs/desk.yaml] [--output-dir runs/desk]
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

from sparsevis.config import load_config
from sparsevis.harness import run_sweep

HERE = Path(__file__).resolve().parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "configs" / "desk.yaml")
    ap.add_argument("--output-dir")
    ap.add_argument("--no-resume", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = load_config(args.config, output_dir=args.output_dir)
    t0 = time.perf_counter()
    res = run_sweep(cfg, resume=not args.no_resume)
    print(f"\n{len(res.rows)} rows in {time.perf_counter() - t0:.0f} s, complete={res.complete}")

    by_entry = {}
    for r in res.rows:
        by_entry.setdefault((r.entry, r.sparsity_prunable), {})[(r.task, r.method, r.kind, r.level)] = r.mean
    cols = [("accuracy", "", "", None), ("iou", "cnn", "", None)] + [("rma", m, "", None) for m in cfg.attribution.methods]
    print("entry  sparsity  " + "  ".join(f"{c[0]}:{c[1]}"[:14].rjust(14) for c in cols))
    for (e, s), vals in sorted(by_entry.items()):
        print(f"{e:5d}  {s:8.4f}  " + "  ".join(f"{vals.get(c, float('nan')):14.4f}" for c in cols))

    spots = json.loads((Path(cfg.output_dir) / "sweet_spots.json").read_text())
    found = [s for s in spots if s["sparsities"] and s["task"] != "distortion-accuracy"]
    print("\nsweet spots (accuracy and metric both improve over the previous entry):")
    for s in found:
        print(f"  {s['task']:<12} {s['method']:<16} {', '.join(f'{v:.4f}' for v in s['sparsities'])}")
    if not found:
        print("  none")
    return 0 if res.complete else 2


if __name__ == "__main__":
    sys.exit(main())
