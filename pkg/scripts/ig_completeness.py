#!/usr/bin/env python3
"""Completeness residual of integrated gradients versus the number of steps,
measured on the dense model of an existing pool.

    python scripts/ig_completeness.py runs/desk [--n-images 200]
"""
import argparse
from pathlib import Path

import numpy as np

from sparsevis.attribution import integrated_gradients_batch
from sparsevis.dataset import load_dataset
from sparsevis.models import predict_labels
from sparsevis.pruning import Pool


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--entry", type=int, default=0)
    ap.add_argument("--n-images", type=int, default=200)
    args = ap.parse_args()

    model, _ = Pool.load(args.run_dir / "pool").load_model(args.entry)
    test, _ = load_dataset(args.run_dir / "data", "test")
    images = np.stack([s.image for s in test[: args.n_images]])
    targets = predict_labels(model, images)
    print(" steps  within 1%  median rel. residual")
    for steps in (8, 16, 32, 64, 128, 256):
        _, delta, res = integrated_gradients_batch(model, images, targets, steps=steps)
        rel = res / np.maximum(np.abs(delta), 1e-12)
        print(f"{steps:6d}  {np.mean(rel <= 0.01):9.3f}  {np.median(rel):.2e}")


if __name__ == "__main__":
    main()
